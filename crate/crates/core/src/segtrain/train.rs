use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, Confusion, EvalReport, ImageMatches, IGNORE_LABEL};
use super::model::{SegModel, SegModelConfig};
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::masks::{box_mask, BinaryMask};
use crate::nn::{Adam, AdamConfig, Parameterized};
use crate::synthdata::{derive_seed, Scene};

/// Mean cross-entropy over pixels whose label is not [`IGNORE_LABEL`], and
/// its gradient with respect to the logits. Returns zeros when every pixel
/// is ignored.
pub fn ignore_aware_loss(logits: ArrayView3<f32>, labels: ArrayView2<u8>) -> (f64, Array3<f32>) {
    let (k, h, w) = logits.dim();
    let mut grad = Array3::<f32>::zeros((k, h, w));
    let kept = labels
        .iter()
        .filter(|&&l| l != IGNORE_LABEL && (l as usize) < k)
        .count();
    if kept == 0 {
        log::warn!("every pixel is ignored; loss defined as 0");
        return (0.0, grad);
    }
    let n = kept as f64;
    let mut loss = 0.0;
    for y in 0..h {
        for x in 0..w {
            let l = labels[[y, x]];
            if l == IGNORE_LABEL || (l as usize) >= k {
                continue;
            }
            let col = logits.slice(s![.., y, x]);
            let m = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = col.iter().map(|&v| (v as f64 - m).exp()).sum();
            loss += -(col[l as usize] as f64 - m) + z.ln();
            for c in 0..k {
                let p = (col[c] as f64 - m).exp() / z;
                let t = if c == l as usize { 1.0 } else { 0.0 };
                grad[[c, y, x]] = ((p - t) / n) as f32;
            }
        }
    }
    (loss / n, grad)
}

/// What the segmentation network predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegMode {
    /// One label per pixel over the whole image.
    Semantic,
    /// Object vs background inside each detected box.
    #[default]
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegTrainConfig {
    pub mode: SegMode,
    /// Box crops used in instance mode.
    pub crop: super::CropConfig,
    pub model: SegModelConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_images: usize,
    pub flip: bool,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            mode: SegMode::default(),
            crop: super::CropConfig::default(),
            model: SegModelConfig::default(),
            epochs: 30,
            lr: 2e-3,
            batch_images: 4,
            flip: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegEpochLog {
    pub epoch: usize,
    pub loss: f64,
}

/// Trains on `(scene, label map)` pairs where label maps hold `0` for
/// background, `class + 1` for objects, and [`IGNORE_LABEL`].
pub fn train_seg(
    scenes: &[Scene],
    labels: &[Array2<u8>],
    num_classes: usize,
    pixel_mean: [f64; 3],
    cfg: &SegTrainConfig,
    mut progress: impl FnMut(&SegEpochLog),
) -> Result<(SegModel, Vec<SegEpochLog>)> {
    if scenes.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scenes but {} label maps",
            scenes.len(),
            labels.len()
        )));
    }
    if scenes.is_empty() {
        return Err(Error::Empty("segmentation training set is empty".into()));
    }
    let mut model = SegModel::new(
        cfg.model.clone(),
        num_classes + 1,
        pixel_mean,
        derive_seed(cfg.seed, 0x5e9),
    );
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5ea));
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let total = (cfg.epochs * scenes.len().div_ceil(cfg.batch_images.max(1))).max(1);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_images.max(1)) {
            model.zero_grad();
            for &i in chunk {
                let mut img = scenes[i].chw::<f32>();
                let mut lab = labels[i].clone();
                if cfg.flip && rng.random::<bool>() {
                    img.invert_axis(ndarray::Axis(2));
                    lab.invert_axis(ndarray::Axis(1));
                    img = img.as_standard_layout().into_owned();
                    lab = lab.as_standard_layout().into_owned();
                }
                let (logits, tape) = model.forward(img.view());
                let (loss, mut grad) = ignore_aware_loss(logits.view(), lab.view());
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "segmentation loss diverged in epoch {epoch}"
                    )));
                }
                sum += loss;
                grad.mapv_inplace(|g| g / chunk.len() as f32);
                model.backward(&tape, &grad);
            }
            let t = opt.steps_taken() as f64 / total as f64;
            opt.config.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
            opt.step(&mut model.params_mut());
        }
        let entry = SegEpochLog {
            epoch,
            loss: sum / scenes.len() as f64,
        };
        progress(&entry);
        log.push(entry);
    }
    Ok((model, log))
}

/// Instance masks from a semantic prediction: the pixels of the detected
/// class inside each detected box.
pub fn instances_from_semantic(
    pred: &Array2<u8>,
    detections: &[Detection],
) -> Vec<(usize, f64, BinaryMask)> {
    let (h, w) = pred.dim();
    detections
        .iter()
        .map(|d| {
            let b = box_mask(&d.bbox, h, w);
            let m =
                BinaryMask::from_shape_fn((h, w), |p| b[p] && pred[p] as usize == d.class_id + 1);
            (d.class_id, d.score, m)
        })
        .collect()
}

/// Semantic maps and instance masks for a split.
pub fn evaluate_predictions(
    scenes: &[Scene],
    semantic: &[Array2<u8>],
    instances: &[Vec<(usize, f64, BinaryMask)>],
    num_classes: usize,
) -> Result<EvalReport> {
    let mut conf = Confusion::new(num_classes + 1);
    let mut matches = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let gt = crate::synthdata::semantic_labels(s);
        conf.add(gt.view(), semantic[i].view());
        let preds: Vec<(usize, f64, &BinaryMask)> =
            instances[i].iter().map(|(c, sc, m)| (*c, *sc, m)).collect();
        let gts: Vec<(usize, &BinaryMask)> =
            s.instances.iter().map(|g| (g.class_id, &g.mask)).collect();
        matches.push(ImageMatches::from_masks(&preds, &gts));
    }
    evaluate(&conf, &matches)
}

/// Runs `model` on every scene and evaluates semantic and instance metrics;
/// instance masks are cut from the semantic output by `detections`.
pub fn evaluate_model(
    model: &SegModel,
    scenes: &[Scene],
    detections: &[Vec<Detection>],
    num_classes: usize,
) -> Result<EvalReport> {
    let semantic: Vec<Array2<u8>> = scenes
        .iter()
        .map(|s| model.predict(s.chw::<f32>().view()))
        .collect();
    let inst: Vec<_> = semantic
        .iter()
        .zip(detections)
        .map(|(p, d)| instances_from_semantic(p, d))
        .collect();
    evaluate_predictions(scenes, &semantic, &inst, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits() -> Array3<f32> {
        Array3::from_shape_fn((3, 2, 4), |(c, y, x)| {
            ((c * 7 + y * 3 + x * 5) % 9) as f32 * 0.3 - 1.0
        })
    }

    fn plain_ce(l: &Array3<f32>, labels: &Array2<u8>, keep: impl Fn(usize, usize) -> bool) -> f64 {
        let mut tot = 0.0;
        let mut n = 0;
        for ((y, x), &lab) in labels.indexed_iter() {
            if !keep(y, x) {
                continue;
            }
            let z: f64 = (0..3).map(|c| (l[[c, y, x]] as f64).exp()).sum();
            tot -= ((l[[lab as usize, y, x]] as f64).exp() / z).ln();
            n += 1;
        }
        tot / n as f64
    }

    #[test]
    fn no_ignore_equals_cross_entropy() {
        let l = logits();
        let lab = Array2::from_shape_fn((2, 4), |(y, x)| ((y + x) % 3) as u8);
        let (loss, _) = ignore_aware_loss(l.view(), lab.view());
        assert!((loss - plain_ce(&l, &lab, |_, _| true)).abs() < 1e-6);
    }

    #[test]
    fn half_ignored_equals_masked_cross_entropy() {
        let l = logits();
        let full = Array2::from_shape_fn((2, 4), |(y, x)| ((y + 2 * x) % 3) as u8);
        let mut lab = full.clone();
        lab.row_mut(1).fill(IGNORE_LABEL);
        let (loss, grad) = ignore_aware_loss(l.view(), lab.view());
        assert!((loss - plain_ce(&l, &full, |y, _| y == 0)).abs() < 1e-6);
        assert!(grad.slice(s![.., 1, ..]).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn all_ignored_is_zero() {
        let l = logits();
        let lab = Array2::from_elem((2, 4), IGNORE_LABEL);
        let (loss, grad) = ignore_aware_loss(l.view(), lab.view());
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }
}
