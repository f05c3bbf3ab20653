use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bbam::Heads;
use crate::detector::{BBox, HeadGrad, HeadModel};
use crate::error::{Error, Result};
use crate::masks::{box_mask, iou, BinaryMask};
use crate::nn::Real;

/// Scalar that gradient baselines differentiate: the sum of the selected
/// head outputs for `class_id` (its probability and/or its four offsets).
pub const GRADIENT_SCALAR: &str = "sum of selected head outputs for the target class";

fn input_gradient<T: Real, D: HeadModel<T>>(
    detector: &D,
    image: ArrayView3<T>,
    proposal: &BBox,
    class_id: usize,
    heads: Heads,
) -> Result<Array3<f64>> {
    let (_, tape) = detector.forward_tape(image, std::slice::from_ref(proposal))?;
    let mut g = HeadGrad::<T>::zeros(detector.num_classes());
    if heads.use_cls() {
        g.probs[class_id + 1] = T::one();
    }
    if heads.use_box() {
        g.offsets[class_id] = [T::one(); 4];
    }
    Ok(detector.backward_tape(&tape, &[g]).mapv(|v| v.f64()))
}

/// Rescales a nonnegative map to a maximum of one (all-zero maps stay zero).
pub fn max_normalize(map: &Array2<f64>) -> Array2<f64> {
    let m = map.iter().cloned().fold(0.0, f64::max);
    if m > 0.0 {
        map / m
    } else {
        map.clone()
    }
}

fn channel_max(g: &Array3<f64>) -> Array2<f64> {
    g.map_axis(Axis(0), |c| c.iter().fold(0.0f64, |a, v| a.max(v.abs())))
}

/// `|∂s/∂I|` maximised over colour channels and max-normalised, where `s` is
/// [`GRADIENT_SCALAR`].
pub fn simple_grad<T: Real, D: HeadModel<T>>(
    detector: &D,
    image: ArrayView3<T>,
    proposal: &BBox,
    class_id: usize,
    heads: Heads,
) -> Result<Array2<f64>> {
    let g = input_gradient(detector, image, proposal, class_id, heads)?;
    Ok(max_normalize(&channel_max(&g)))
}

/// Mean of `|∂s/∂I|` over `samples` copies with Gaussian noise of standard
/// deviation `sigma` times the image's dynamic range, then channel max and
/// max-normalisation.
#[allow(clippy::too_many_arguments)]
pub fn smooth_grad<T: Real, D: HeadModel<T>>(
    detector: &D,
    image: ArrayView3<T>,
    proposal: &BBox,
    class_id: usize,
    heads: Heads,
    sigma: f64,
    samples: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if samples == 0 || sigma < 0.0 {
        return Err(Error::Config(format!(
            "smooth grad needs samples > 0 and sigma >= 0 (got {samples}, {sigma})"
        )));
    }
    let lo = image.iter().map(|v| v.f64()).fold(f64::INFINITY, f64::min);
    let hi = image
        .iter()
        .map(|v| v.f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let std = sigma * (hi - lo);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut acc = Array3::<f64>::zeros(image.dim());
    for _ in 0..samples {
        let noisy = if std > 0.0 {
            image.mapv(|v| T::lit(v.f64() + noise.sample(&mut rng)))
        } else {
            image.to_owned()
        };
        let g = input_gradient(detector, noisy.view(), proposal, class_id, heads)?;
        acc.zip_mut_with(&g, |a, v| *a += v.abs());
    }
    acc /= samples as f64;
    Ok(max_normalize(&channel_max(&acc)))
}

/// Mean IoU of thresholded maps against masks at each threshold.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Localization {
    pub per_threshold: Vec<(f64, f64)>,
    pub best_threshold: f64,
    pub best_iou: f64,
}

/// Thresholds `0.1, 0.2, …, 0.9`.
pub fn default_thresholds() -> Vec<f64> {
    (1..10).map(|i| i as f64 / 10.0).collect()
}

/// Sweeps `thresholds` and keeps the one with the best mean IoU (maps are
/// binarised with `value >= threshold`).
pub fn localization_accuracy(
    maps: &[(Array2<f64>, &BinaryMask)],
    thresholds: &[f64],
) -> Result<Localization> {
    if maps.is_empty() || thresholds.is_empty() {
        return Err(Error::Empty(
            "localization accuracy needs maps and thresholds".into(),
        ));
    }
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut total = 0.0;
        for (map, gt) in maps {
            if map.dim() != gt.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "map {:?} vs mask {:?}",
                    map.dim(),
                    gt.dim()
                )));
            }
            total += iou(&map.mapv(|v| v >= t), gt);
        }
        per_threshold.push((t, total / maps.len() as f64));
    }
    let &(best_threshold, best_iou) =
        per_threshold
            .iter()
            .fold(&per_threshold[0], |b, c| if c.1 > b.1 { c } else { b });
    Ok(Localization {
        per_threshold,
        best_threshold,
        best_iou,
    })
}

/// Share of a nonnegative map's mass that falls inside `b`.
pub fn mass_inside(map: &Array2<f64>, b: &BBox) -> f64 {
    let (h, w) = map.dim();
    let inside = box_mask(b, h, w);
    let total: f64 = map.sum();
    if total <= 0.0 {
        return 0.0;
    }
    map.iter()
        .zip(inside.iter())
        .filter(|(_, &i)| i)
        .map(|(v, _)| v)
        .sum::<f64>()
        / total
}
