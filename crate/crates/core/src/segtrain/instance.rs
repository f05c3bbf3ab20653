//! Instance mode: a mask head that segments the object inside one box.
//!
//! Each box is cut out with some context, resampled to a fixed square and
//! fed through a two-label [`SegModel`]. The class of a predicted instance is
//! the class of the box that produced it.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{EvalReport, IGNORE_LABEL};
use super::model::SegModel;
use super::train::{evaluate_predictions, ignore_aware_loss, SegEpochLog};
use crate::detector::{BBox, Detection};
use crate::error::{Error, Result};
use crate::masks::BinaryMask;
use crate::nn::{Adam, AdamConfig, Parameterized};
use crate::pseudogt::{ScenePseudoLabels, BG, FG};
use crate::synthdata::{derive_seed, Scene};

/// Detections below this score do not paint the semantic map.
pub const SEMANTIC_MIN_SCORE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    /// Side of the square crop fed to the network (multiple of 16).
    pub size: usize,
    /// Context added on each side, as a fraction of the box side.
    pub context: f64,
    /// Training boxes move each side by up to this fraction of its length.
    pub box_jitter: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            size: 64,
            context: 0.15,
            box_jitter: 0.05,
        }
    }
}

/// Box grown by the context margin.
pub fn crop_region(b: &BBox, context: f64) -> BBox {
    let (dx, dy) = (context * b.width(), context * b.height());
    BBox::new(b.x_min - dx, b.y_min - dy, b.x_max + dx, b.y_max + dy)
}

fn source_coord(region_min: f64, region_len: f64, size: usize, i: usize) -> f64 {
    region_min + (i as f64 + 0.5) * region_len / size as f64 - 0.5
}

/// Bilinear sample of `plane` at continuous pixel-centre coordinates,
/// clamped to the border.
fn bilinear(plane: ArrayView2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = plane.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = plane[[y0, x0]] + fx * (plane[[y0, x1]] - plane[[y0, x0]]);
    let bottom = plane[[y1, x0]] + fx * (plane[[y1, x1]] - plane[[y1, x0]]);
    top + fy * (bottom - top)
}

/// `3×size×size` bilinear crop of `region` from a `3×H×W` image.
pub fn crop_image(image: ArrayView3<f32>, region: &BBox, size: usize) -> Array3<f32> {
    Array3::from_shape_fn((3, size, size), |(c, i, j)| {
        let y = source_coord(region.y_min, region.height(), size, i);
        let x = source_coord(region.x_min, region.width(), size, j);
        bilinear(image.index_axis(ndarray::Axis(0), c), y, x)
    })
}

/// Nearest-neighbour crop of an instance trimap as training labels
/// (`1` object, `0` background, [`IGNORE_LABEL`]). Outside the image is
/// background.
pub fn crop_labels(trimap: ArrayView2<u8>, region: &BBox, size: usize) -> Array2<u8> {
    let (h, w) = trimap.dim();
    Array2::from_shape_fn((size, size), |(i, j)| {
        let y = (source_coord(region.y_min, region.height(), size, i) + 0.5).floor();
        let x = (source_coord(region.x_min, region.width(), size, j) + 0.5).floor();
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
            return 0;
        }
        match trimap[[y as usize, x as usize]] {
            FG => 1,
            BG => 0,
            _ => IGNORE_LABEL,
        }
    })
}

/// Resamples a crop-space probability map back onto an `h×w` image and
/// thresholds it at 0.5. Pixels outside `region` stay false.
pub fn paste_mask(prob: ArrayView2<f32>, region: &BBox, h: usize, w: usize) -> BinaryMask {
    let size = prob.dim().0;
    let (sy, sx) = (size as f64 / region.height(), size as f64 / region.width());
    BinaryMask::from_shape_fn((h, w), |(y, x)| {
        let (cy, cx) = (y as f64 + 0.5, x as f64 + 0.5);
        if cy < region.y_min || cy > region.y_max || cx < region.x_min || cx > region.x_max {
            return false;
        }
        bilinear(
            prob,
            (cy - region.y_min) * sy - 0.5,
            (cx - region.x_min) * sx - 0.5,
        ) >= 0.5
    })
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, b: &BBox, rate: f64) -> BBox {
    if rate <= 0.0 {
        return *b;
    }
    let (w, h) = (b.width(), b.height());
    let mut d = || rng.random_range(-rate..=rate);
    let j = BBox::new(
        b.x_min + d() * w,
        b.y_min + d() * h,
        b.x_max + d() * w,
        b.y_max + d() * h,
    );
    if j.is_valid() {
        j
    } else {
        *b
    }
}

/// Trains the box mask head on every (ground-truth box, instance trimap)
/// pair.
pub fn train_instance_seg(
    scenes: &[Scene],
    labels: &[ScenePseudoLabels],
    pixel_mean: [f64; 3],
    crop: &CropConfig,
    train: &super::SegTrainConfig,
    mut progress: impl FnMut(&SegEpochLog),
) -> Result<(SegModel, Vec<SegEpochLog>)> {
    if scenes.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scenes but {} label sets",
            scenes.len(),
            labels.len()
        )));
    }
    if crop.size == 0 || !crop.size.is_multiple_of(16) {
        return Err(Error::Config(format!(
            "crop size {} must be a positive multiple of 16",
            crop.size
        )));
    }
    let mut samples = Vec::new();
    for (si, (s, l)) in scenes.iter().zip(labels).enumerate() {
        if l.instances.len() != s.instances.len() {
            return Err(Error::ShapeMismatch(format!(
                "scene {si}: {} instances but {} trimaps",
                s.instances.len(),
                l.instances.len()
            )));
        }
        samples.extend((0..s.instances.len()).map(|i| (si, i)));
    }
    if samples.is_empty() {
        return Err(Error::Empty(
            "no instances to train the mask head on".into(),
        ));
    }
    let images: Vec<Array3<f32>> = scenes.iter().map(|s| s.chw::<f32>()).collect();
    let mut model = SegModel::new(
        train.model.clone(),
        2,
        pixel_mean,
        derive_seed(train.seed, 0x5e9),
    );
    let mut opt = Adam::new(AdamConfig {
        lr: train.lr,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, 0x5ea));
    let batch = train.batch_images.max(1);
    let total = (train.epochs * samples.len().div_ceil(batch)).max(1);
    let mut log = Vec::new();
    for epoch in 0..train.epochs {
        for i in (1..samples.len()).rev() {
            samples.swap(i, rng.random_range(0..=i));
        }
        let mut sum = 0.0;
        for chunk in samples.chunks(batch) {
            model.zero_grad();
            for &(si, ii) in chunk {
                let b = jitter(&mut rng, &scenes[si].instances[ii].bbox, crop.box_jitter);
                let region = crop_region(&b, crop.context);
                let mut img = crop_image(images[si].view(), &region, crop.size);
                let mut lab =
                    crop_labels(labels[si].instances[ii].labels.view(), &region, crop.size);
                if train.flip && rng.random::<bool>() {
                    img.invert_axis(ndarray::Axis(2));
                    lab.invert_axis(ndarray::Axis(1));
                    img = img.as_standard_layout().into_owned();
                    lab = lab.as_standard_layout().into_owned();
                }
                let (logits, tape) = model.forward(img.view());
                let (loss, mut grad) = ignore_aware_loss(logits.view(), lab.view());
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "mask head loss diverged in epoch {epoch}"
                    )));
                }
                sum += loss;
                grad.mapv_inplace(|g| g / chunk.len() as f32);
                model.backward(&tape, &grad);
            }
            let t = opt.steps_taken() as f64 / total as f64;
            opt.config.lr = train.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
            opt.step(&mut model.params_mut());
        }
        let entry = SegEpochLog {
            epoch,
            loss: sum / samples.len() as f64,
        };
        progress(&entry);
        log.push(entry);
    }
    Ok((model, log))
}

/// Object probability inside `bbox` in crop space.
pub fn box_probability(
    model: &SegModel,
    image: ArrayView3<f32>,
    bbox: &BBox,
    crop: &CropConfig,
) -> Array2<f32> {
    let region = crop_region(bbox, crop.context);
    let (logits, _) = model.forward(crop_image(image, &region, crop.size).view());
    let (_, s, _) = logits.dim();
    Array2::from_shape_fn((s, s), |(i, j)| {
        let d = logits[[1, i, j]] - logits[[0, i, j]];
        1.0 / (1.0 + (-d).exp())
    })
}

/// One mask per detection, with the detection's class and score.
pub fn predict_instances(
    model: &SegModel,
    scene: &Scene,
    detections: &[Detection],
    crop: &CropConfig,
) -> Vec<(usize, f64, BinaryMask)> {
    let image = scene.chw::<f32>();
    let (h, w) = (scene.height(), scene.width());
    detections
        .iter()
        .map(|d| {
            let prob = box_probability(model, image.view(), &d.bbox, crop);
            (
                d.class_id,
                d.score,
                paste_mask(prob.view(), &crop_region(&d.bbox, crop.context), h, w),
            )
        })
        .collect()
}

/// Semantic map from instance masks: higher scores paint over lower ones,
/// instances under [`SEMANTIC_MIN_SCORE`] are skipped.
pub fn semantic_from_instances(
    instances: &[(usize, f64, BinaryMask)],
    h: usize,
    w: usize,
) -> Array2<u8> {
    let mut order: Vec<&(usize, f64, BinaryMask)> = instances
        .iter()
        .filter(|i| i.1 >= SEMANTIC_MIN_SCORE)
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut out = Array2::<u8>::zeros((h, w));
    for (c, _, m) in order {
        ndarray::Zip::from(&mut out).and(m).for_each(|o, &v| {
            if v {
                *o = (*c + 1) as u8;
            }
        });
    }
    out
}

pub fn evaluate_instance_model(
    model: &SegModel,
    scenes: &[Scene],
    detections: &[Vec<Detection>],
    crop: &CropConfig,
    num_classes: usize,
) -> Result<EvalReport> {
    if scenes.len() != detections.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scenes but {} detection lists",
            scenes.len(),
            detections.len()
        )));
    }
    let inst: Vec<_> = scenes
        .iter()
        .zip(detections)
        .map(|(s, d)| predict_instances(model, s, d, crop))
        .collect();
    let semantic: Vec<Array2<u8>> = scenes
        .iter()
        .zip(&inst)
        .map(|(s, i)| semantic_from_instances(i, s.height(), s.width()))
        .collect();
    evaluate_predictions(scenes, &semantic, &inst, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_then_paste_recovers_a_box_aligned_mask() {
        let (h, w) = (40, 50);
        let b = BBox::new(8.0, 6.0, 40.0, 30.0);
        let region = crop_region(&b, 0.15);
        let truth = BinaryMask::from_shape_fn((h, w), |(y, x)| {
            (12..26).contains(&y) && (14..34).contains(&x)
        });
        let trimap = truth.mapv(|v| if v { FG } else { BG });
        let lab = crop_labels(trimap.view(), &region, 64);
        let prob = lab.mapv(|v| if v == 1 { 1.0f32 } else { 0.0 });
        let back = paste_mask(prob.view(), &region, h, w);
        let inter = back
            .iter()
            .zip(truth.iter())
            .filter(|(a, b)| **a && **b)
            .count();
        let union = back
            .iter()
            .zip(truth.iter())
            .filter(|(a, b)| **a || **b)
            .count();
        assert!(inter as f64 / union as f64 > 0.95);
    }

    #[test]
    fn ignore_and_outside_pixels() {
        let mut t = Array2::<u8>::from_elem((10, 10), BG);
        t[[5, 5]] = crate::pseudogt::IGNORE;
        let whole = BBox::new(0.0, 0.0, 10.0, 10.0);
        let lab = crop_labels(t.view(), &whole, 10);
        assert_eq!(lab[[5, 5]], IGNORE_LABEL);
        assert_eq!(lab[[0, 0]], 0);
        let outside = BBox::new(-10.0, -10.0, 0.0, 0.0);
        assert!(crop_labels(t.view(), &outside, 16).iter().all(|&v| v == 0));
    }

    #[test]
    fn constant_image_crops_to_constant() {
        let img = Array3::<f32>::from_elem((3, 12, 9), 0.25);
        let c = crop_image(img.view(), &BBox::new(-3.0, 2.0, 7.5, 15.0), 16);
        assert!(c.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn higher_score_paints_last() {
        let a = BinaryMask::from_elem((4, 4), true);
        let b = BinaryMask::from_shape_fn((4, 4), |(y, _)| y < 2);
        let sem = semantic_from_instances(
            &[
                (0, 0.9, b),
                (2, 0.6, a),
                (1, 0.3, BinaryMask::from_elem((4, 4), true)),
            ],
            4,
            4,
        );
        assert_eq!(sem[[0, 0]], 1);
        assert_eq!(sem[[3, 3]], 3);
    }
}
