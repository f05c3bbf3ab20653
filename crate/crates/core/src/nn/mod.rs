//! Minimal differentiable building blocks with hand-written backward passes.
//!
//! Everything operates on a single image in channel-major (`C×H×W`) layout.
//! Layers are generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod adam;
mod conv;
mod linear;
mod real;
mod roi_align;
mod upsample;

pub use adam::{Adam, AdamConfig, AdamState};
pub use conv::{Conv2d, ConvCache};
pub use linear::{Linear, LinearCache};
pub use real::Real;
pub use roi_align::{roi_align, roi_align_backward, RoiAlignCache, RoiRegion};
pub use upsample::{resample, resample_backward, upsample_matrix, Upsample2x};

use ndarray::{Array, ArrayD, Dimension};
use rand::Rng;
use rand_distr::StandardNormal;

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T: Real> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Real> Param<T> {
    pub fn new<D: Dimension>(value: Array<T, D>) -> Self {
        let value = value.into_dyn();
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            value: self
                .value
                .mapv(|v| U::from_f64(v.to_f64().unwrap_or(0.0)).unwrap()),
            grad: self
                .grad
                .mapv(|v| U::from_f64(v.to_f64().unwrap_or(0.0)).unwrap()),
        }
    }
}

/// Anything owning parameters that an optimizer can walk.
pub trait Parameterized<T: Real> {
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.len()).sum()
    }
}

/// He-normal initialisation for a tensor with `fan_in` inputs per output.
pub fn he_normal<R: Rng + ?Sized, T: Real>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
) -> ArrayD<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_simple_fn(shape.to_vec(), || {
        let z: f64 = rng.sample(StandardNormal);
        T::from_f64(z * std).unwrap()
    })
}

/// In-place ReLU; returns the activation so the backward pass can gate on it.
pub fn relu_inplace<T: Real, D: Dimension>(x: &mut Array<T, D>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Gates `grad` by the ReLU output `act` (gradient is zero where `act <= 0`).
pub fn relu_backward<T: Real, D: Dimension>(grad: &mut Array<T, D>, act: &Array<T, D>) {
    ndarray::Zip::from(grad).and(act).for_each(|g, &a| {
        if a <= T::zero() {
            *g = T::zero();
        }
    });
}

/// Numerically stable softmax of a logit vector.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Back-propagates `d loss / d probs` through softmax to the logits.
pub fn softmax_backward<T: Real>(probs: &[T], grad_probs: &[T]) -> Vec<T> {
    let dot: T = probs.iter().zip(grad_probs).map(|(&p, &g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(&p, &g)| p * (g - dot))
        .collect()
}
