use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Ix2};
use rand::Rng;

use super::{he_normal, Param, Real};

/// Fully connected layer applied to a batch of row vectors.
#[derive(Debug, Clone)]
pub struct Linear<T: Real> {
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug, Clone)]
pub struct LinearCache<T: Real> {
    input: Array2<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Self::with_gain(rng, inputs, outputs, 1.0)
    }

    /// He initialisation scaled by `gain` (small gains for output layers).
    pub fn with_gain<R: Rng + ?Sized>(
        rng: &mut R,
        inputs: usize,
        outputs: usize,
        gain: f64,
    ) -> Self {
        let w = he_normal::<_, T>(rng, &[outputs, inputs], inputs).mapv(|v| v * T::lit(gain));
        Self {
            weight: Param::new(w),
            bias: Param::new(Array1::<T>::zeros(outputs)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn w(&self) -> ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-D weight")
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, LinearCache<T>) {
        let mut out = Array2::<T>::zeros((x.nrows(), self.outputs()));
        general_mat_mul(T::one(), &x, &self.w().t(), T::zero(), &mut out);
        let b = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("1-D bias");
        out += &b.insert_axis(Axis(0));
        (
            out,
            LinearCache {
                input: x.to_owned(),
            },
        )
    }

    pub fn backward(
        &mut self,
        cache: &LinearCache<T>,
        grad_out: ArrayView2<T>,
        accumulate: bool,
    ) -> Array2<T> {
        if accumulate {
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<Ix2>()
                .expect("2-D weight");
            general_mat_mul(T::one(), &grad_out.t(), &cache.input, T::one(), &mut gw);
            let gb = grad_out.sum_axis(Axis(0));
            for (g, v) in self.bias.grad.iter_mut().zip(gb.iter()) {
                *g += *v;
            }
        }
        self.backward_input(grad_out)
    }

    pub fn backward_input(&self, grad_out: ArrayView2<T>) -> Array2<T> {
        let mut gx = Array2::<T>::zeros((grad_out.nrows(), self.inputs()));
        general_mat_mul(T::one(), &grad_out, &self.w(), T::zero(), &mut gx);
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut lin = Linear::<f64>::new(&mut rng, 4, 3);
        let x = Array2::from_shape_fn((2, 4), |_| rng.random::<f64>());
        let probe = Array2::from_shape_fn((2, 3), |_| rng.random::<f64>());
        let (_, cache) = lin.forward(x.view());
        let gx = lin.backward(&cache, probe.view(), true);
        let f = |l: &Linear<f64>, x: &Array2<f64>| (l.forward(x.view()).0 * &probe).sum();
        let h = 1e-6;
        let mut xp = x.clone();
        xp[[1, 2]] += h;
        let mut xm = x.clone();
        xm[[1, 2]] -= h;
        assert!(((f(&lin, &xp) - f(&lin, &xm)) / (2.0 * h) - gx[[1, 2]]).abs() < 1e-7);
        let mut lp = lin.clone();
        lp.weight.value[[2, 1]] += h;
        let mut lm = lin.clone();
        lm.weight.value[[2, 1]] -= h;
        assert!(((f(&lp, &x) - f(&lm, &x)) / (2.0 * h) - lin.weight.grad[[2, 1]]).abs() < 1e-7);
        assert!((lin.bias.grad[[0]] - probe.column(0).sum()).abs() < 1e-12);
    }
}
