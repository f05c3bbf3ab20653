use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::mask::{perturb_with, upsample_backward, AttributionMask, StridePolicy};
use crate::detector::{BBox, HeadGrad, HeadModel, HeadOutputs};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Real};

/// Which head terms enter the preservation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heads {
    Box,
    Cls,
    Both,
}

impl Heads {
    pub fn use_box(self) -> bool {
        matches!(self, Heads::Box | Heads::Both)
    }

    pub fn use_cls(self) -> bool {
        matches!(self, Heads::Cls | Heads::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            Heads::Box => "box",
            Heads::Cls => "cls",
            Heads::Both => "both",
        }
    }
}

impl std::str::FromStr for Heads {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(Heads::Box),
            "cls" => Ok(Heads::Cls),
            "both" => Ok(Heads::Both),
            _ => Err(Error::Config(format!(
                "unknown head selection '{s}' (expected box, cls or both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BbamConfig {
    pub lambda: f64,
    pub lambda_tv: f64,
    pub beta: f64,
    pub iterations: usize,
    pub lr: f64,
    pub stride: StridePolicy,
    pub heads: Heads,
    /// Compare the whole probability vector instead of the target class only.
    pub cls_full_vector: bool,
    /// Rescale each finished map to a maximum of 1 before thresholding.
    pub max_normalize: bool,
}

impl Default for BbamConfig {
    fn default() -> Self {
        Self {
            lambda: 0.007,
            lambda_tv: 1e-4,
            beta: 3.0,
            iterations: 300,
            lr: 0.02,
            stride: StridePolicy::default(),
            heads: Heads::Both,
            cls_full_vector: false,
            max_normalize: false,
        }
    }
}

impl BbamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.lambda_tv.is_nan() || self.lambda_tv < 0.0 {
            return bad(format!(
                "lambda_tv must be non-negative, got {}",
                self.lambda_tv
            ));
        }
        if self.beta.is_nan() || self.beta < 1.0 {
            return bad(format!("beta must be at least 1, got {}", self.beta));
        }
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad(format!("step size must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

/// Predictions on the unperturbed image that the mask must preserve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub proposal: BBox,
    pub class_id: usize,
    /// Probability of `class_id`.
    pub prob: f64,
    pub probs: Vec<f64>,
    /// Head-space offsets for `class_id`.
    pub offsets: [f64; 4],
}

impl Target {
    pub fn capture<T: Real>(proposal: BBox, class_id: usize, out: &HeadOutputs<T>) -> Self {
        let out = out.to_f64();
        Self {
            proposal,
            class_id,
            prob: out.class_prob(class_id),
            probs: out.probs.clone(),
            offsets: out.offsets[class_id],
        }
    }
}

/// Per-head preservation losses (averaged over proposals) before the
/// indicator flags are applied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadLosses {
    pub box_loss: f64,
    pub cls_loss: f64,
}

impl HeadLosses {
    pub fn combined(&self, heads: Heads) -> f64 {
        let b = if heads.use_box() { self.box_loss } else { 0.0 };
        let c = if heads.use_cls() { self.cls_loss } else { 0.0 };
        b + c
    }
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Losses of perturbed outputs against targets, and the matching head
/// gradients of the flagged loss.
fn head_losses<T: Real>(
    outs: &[HeadOutputs<T>],
    targets: &[Target],
    heads: Heads,
    full_vector: bool,
    num_classes: usize,
) -> (HeadLosses, Vec<HeadGrad<T>>) {
    let n = targets.len() as f64;
    let mut l = HeadLosses::default();
    let mut grads = Vec::with_capacity(outs.len());
    for (o, t) in outs.iter().zip(targets) {
        let mut g = HeadGrad::<T>::zeros(num_classes);
        for d in 0..4 {
            let diff = o.offsets[t.class_id][d].f64() - t.offsets[d];
            l.box_loss += diff.abs() / n;
            if heads.use_box() {
                g.offsets[t.class_id][d] = T::lit(sgn(diff) / n);
            }
        }
        let classes: Vec<usize> = if full_vector {
            (0..o.probs.len()).collect()
        } else {
            vec![t.class_id + 1]
        };
        for k in classes {
            let diff = o.probs[k].f64() - t.probs[k];
            l.cls_loss += diff.abs() / n;
            if heads.use_cls() {
                g.probs[k] = T::lit(sgn(diff) / n);
            }
        }
        grads.push(g);
    }
    (l, grads)
}

/// Preservation loss of `Φ(I, M)` over the proposals:
/// mean of `1_box·‖t − f_box‖₁ + 1_cls·|p − f_cls|`.
pub fn perturb_loss<T: Real, D: HeadModel<T>>(
    detector: &D,
    image: ArrayView3<T>,
    mask: &AttributionMask,
    mean: [f64; 3],
    targets: &[Target],
    config: &BbamConfig,
) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::NoPositiveProposals(
            "perturbation loss needs at least one proposal".into(),
        ));
    }
    let x = super::mask::perturb(image, mask, mean)?;
    let props: Vec<BBox> = targets.iter().map(|t| t.proposal).collect();
    let outs = detector.heads(x.view(), &props)?;
    let (l, _) = head_losses(
        &outs,
        targets,
        config.heads,
        config.cls_full_vector,
        detector.num_classes(),
    );
    Ok(l.combined(config.heads))
}

/// `λ·Σ|M| + λ_TV·Σ(|ΔxM|^β + |ΔyM|^β)` with forward differences.
pub fn regularizer(m: ArrayView2<f64>, config: &BbamConfig) -> (f64, f64) {
    let l1 = config.lambda * m.iter().map(|v| v.abs()).sum::<f64>();
    let (rows, cols) = m.dim();
    let mut tv = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                tv += (m[[r, c + 1]] - m[[r, c]]).abs().powf(config.beta);
            }
            if r + 1 < rows {
                tv += (m[[r + 1, c]] - m[[r, c]]).abs().powf(config.beta);
            }
        }
    }
    (l1, config.lambda_tv * tv)
}

fn regularizer_grad(m: ArrayView2<f64>, config: &BbamConfig) -> Array2<f64> {
    let (rows, cols) = m.dim();
    let mut g = m.mapv(|v| config.lambda * sgn(v));
    let b = config.beta;
    let dpow = |d: f64| config.lambda_tv * b * d.abs().powf(b - 1.0) * sgn(d);
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                let k = dpow(m[[r, c + 1]] - m[[r, c]]);
                g[[r, c + 1]] += k;
                g[[r, c]] -= k;
            }
            if r + 1 < rows {
                let k = dpow(m[[r + 1, c]] - m[[r, c]]);
                g[[r + 1, c]] += k;
                g[[r, c]] -= k;
            }
        }
    }
    g
}

/// Full objective: regularizers plus an already evaluated preservation loss.
pub fn total_loss(mask: &AttributionMask, perturb_loss_value: f64, config: &BbamConfig) -> f64 {
    let (l1, tv) = regularizer(mask.values.view(), config);
    l1 + tv + perturb_loss_value
}

/// Objective value and its gradient with respect to the coarse mask.
pub fn loss_and_grad<T: Real, D: HeadModel<T>>(
    detector: &D,
    image: ArrayView3<T>,
    mask: &AttributionMask,
    mean: [f64; 3],
    targets: &[Target],
    config: &BbamConfig,
) -> Result<(f64, HeadLosses, Array2<f64>)> {
    let up = mask.upsampled();
    let x = perturb_with(image, up.view(), mean);
    let props: Vec<BBox> = targets.iter().map(|t| t.proposal).collect();
    let (outs, tape) = detector.forward_tape(x.view(), &props)?;
    let (hl, hgrads) = head_losses(
        &outs,
        targets,
        config.heads,
        config.cls_full_vector,
        detector.num_classes(),
    );
    let gimg: Array3<T> = detector.backward_tape(&tape, &hgrads);
    // dΦ/dM̂ = I − μ, summed over channels
    let mut gup = Array2::<f64>::zeros(up.dim());
    for (c, plane) in gimg.axis_iter(Axis(0)).enumerate() {
        let src = image.index_axis(Axis(0), c);
        ndarray::Zip::from(&mut gup)
            .and(&plane)
            .and(&src)
            .for_each(|g, &gi, &s| {
                *g += gi.f64() * (s.f64() - mean[c]);
            });
    }
    let (rows, cols) = mask.values.dim();
    let mut grad = upsample_backward(gup.view(), mask.stride, rows, cols);
    grad += &regularizer_grad(mask.values.view(), config);
    let total = total_loss(mask, hl.combined(config.heads), config);
    Ok((total, hl, grad))
}

/// Objective terms recorded before each optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub total: f64,
    pub box_loss: f64,
    pub cls_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskOptimization {
    pub mask: AttributionMask,
    pub trajectory: Vec<IterationLog>,
}

/// Minimizes the objective over `M` with Adam from an all-ones start,
/// clamping to `[0, 1]` after each step.
pub fn optimize_mask<T: Real, D: HeadModel<T>>(
    detector: &D,
    image: ArrayView3<T>,
    mean: [f64; 3],
    targets: &[Target],
    stride: usize,
    config: &BbamConfig,
) -> Result<MaskOptimization> {
    config.validate()?;
    if targets.is_empty() {
        return Err(Error::NoPositiveProposals(
            "no proposals to preserve".into(),
        ));
    }
    let (_, h, w) = image.dim();
    let mut mask = AttributionMask::filled(w, h, stride, 1.0);
    let mut adam = AdamState::<f64>::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        mask.values.len(),
    );
    let mut trajectory = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let (total, hl, grad) = loss_and_grad(detector, image, &mask, mean, targets, config)?;
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "mask objective became {total} at iteration {it}"
            )));
        }
        trajectory.push(IterationLog {
            total,
            box_loss: hl.box_loss,
            cls_loss: hl.cls_loss,
        });
        let values = mask.values.as_slice_mut().expect("standard layout");
        adam.update(values, grad.as_slice().expect("standard layout"));
        mask.clamp_unit();
        debug_assert!(mask.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    if config.max_normalize {
        mask = mask.max_normalized();
    }
    Ok(MaskOptimization { mask, trajectory })
}

/// Exponential moving average with smoothing `2 / (window + 1)`.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let a = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let s = match acc {
            None => v,
            Some(p) => a * v + (1.0 - a) * p,
        };
        acc = Some(s);
        out.push(s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regularizer_hand_values() {
        let cfg = BbamConfig::default();
        let zero = Array2::<f64>::zeros((3, 4));
        assert_eq!(regularizer(zero.view(), &cfg), (0.0, 0.0));
        let ones = Array2::<f64>::ones((3, 4));
        let (l1, tv) = regularizer(ones.view(), &cfg);
        assert!((l1 - 0.007 * 12.0).abs() < 1e-15);
        assert_eq!(tv, 0.0);
        let m = ndarray::arr2(&[[1.0, 0.0], [0.0, 0.0]]);
        let (_, tv) = regularizer(m.view(), &cfg);
        assert!((tv - 2e-4).abs() < 1e-15);
    }

    #[test]
    fn regularizer_gradient_matches_differences() {
        let cfg = BbamConfig {
            lambda_tv: 0.3,
            ..Default::default()
        };
        let m = Array2::from_shape_fn((3, 3), |(r, c)| {
            0.1 + 0.27 * r as f64 + 0.19 * (c * c) as f64 % 0.8
        });
        let g = regularizer_grad(m.view(), &cfg);
        let f = |m: &Array2<f64>| {
            let (a, b) = regularizer(m.view(), &cfg);
            a + b
        };
        for idx in [(0, 0), (1, 1), (2, 1)] {
            let eps = 1e-6;
            let (mut p, mut q) = (m.clone(), m.clone());
            p[idx] += eps;
            q[idx] -= eps;
            let fd = (f(&p) - f(&q)) / (2.0 * eps);
            assert!((fd - g[idx]).abs() < 1e-6, "{fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(BbamConfig::default().validate().is_ok());
        assert!(BbamConfig {
            lambda: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(BbamConfig {
            beta: 0.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(BbamConfig {
            iterations: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!("cls".parse::<Heads>().unwrap(), Heads::Cls);
        assert!("neck".parse::<Heads>().is_err());
    }

    #[test]
    fn smoothing_constant_sequence() {
        assert_eq!(smoothed(&[2.0; 5], 30), vec![2.0; 5]);
    }
}
