use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::boxes::BBox;
use super::model::{Detector, DetectorConfig};
use crate::bbam::upsample;
use crate::error::{Error, Result};
use crate::masks::dilate;
use crate::nn::{Adam, AdamConfig, Parameterized};
use crate::synthdata::{derive_seed, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorTrainConfig {
    pub model: DetectorConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_images: usize,
    /// Jittered copies per ground-truth box at ±`jitter` of the side length.
    pub near_jitter: usize,
    pub jitter: f64,
    /// Wider jitters at ±`wide_jitter`; labelled by IoU against ground truth.
    pub wide_jitter_count: usize,
    pub wide_jitter: f64,
    /// Random background boxes with IoU below `background_iou` to every box.
    pub background: usize,
    pub background_iou: f64,
    pub positive_iou: f64,
    pub box_loss_weight: f64,
    pub smooth_l1_beta: f64,
    pub seed: u64,
    pub min_scenes: usize,
    /// Probability of blending background regions of a training image
    /// towards the pixel mean (instances stay intact).
    pub background_blend: f64,
    /// Range of the blend grid cell size in pixels.
    pub blend_cell: [usize; 2],
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            model: DetectorConfig::default(),
            epochs: 30,
            lr: 1e-3,
            batch_images: 4,
            near_jitter: 6,
            jitter: 0.3,
            wide_jitter_count: 6,
            wide_jitter: 0.5,
            background: 16,
            background_iou: 0.3,
            positive_iou: 0.5,
            box_loss_weight: 1.0,
            smooth_l1_beta: 1.0 / 9.0,
            seed: 0,
            min_scenes: 500,
            background_blend: 0.5,
            blend_cell: [4, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub cls_loss: f64,
    pub box_loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// A labelled training proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub proposal: BBox,
    /// Foreground class id, or `None` for background.
    pub class_id: Option<usize>,
    pub target: Option<BBox>,
}

/// Perturbs every coordinate independently by up to `rate` of the matching side.
pub fn jitter_once<R: Rng + ?Sized>(
    rng: &mut R,
    b: &BBox,
    rate: f64,
    width: usize,
    height: usize,
) -> BBox {
    let (w, h) = (b.width(), b.height());
    let mut d = || {
        if rate > 0.0 {
            rng.random_range(-rate..=rate)
        } else {
            0.0
        }
    };
    let j = BBox::new(
        b.x_min + d() * w,
        b.y_min + d() * h,
        b.x_max + d() * w,
        b.y_max + d() * h,
    )
    .clip(width, height);
    if j.width() < 1.0 || j.height() < 1.0 {
        *b
    } else {
        j
    }
}

/// Proposals and labels for one training scene.
pub fn sample_proposals<R: Rng + ?Sized>(
    rng: &mut R,
    scene: &Scene,
    cfg: &DetectorTrainConfig,
) -> Vec<Sample> {
    let (w, h) = (scene.width(), scene.height());
    let gts: Vec<(BBox, usize)> = scene
        .instances
        .iter()
        .map(|i| (i.bbox, i.class_id))
        .collect();
    let label = |p: BBox| -> Sample {
        let best = gts
            .iter()
            .map(|(g, c)| (g.iou(&p), *g, *c))
            .max_by(|a, b| a.0.total_cmp(&b.0));
        match best {
            Some((iou, g, c)) if iou >= cfg.positive_iou => Sample {
                proposal: p,
                class_id: Some(c),
                target: Some(g),
            },
            _ => Sample {
                proposal: p,
                class_id: None,
                target: None,
            },
        }
    };
    let mut out = Vec::new();
    for (g, _) in &gts {
        out.push(label(*g));
        for _ in 0..cfg.near_jitter {
            out.push(label(jitter_once(rng, g, cfg.jitter, w, h)));
        }
        for _ in 0..cfg.wide_jitter_count {
            out.push(label(jitter_once(rng, g, cfg.wide_jitter, w, h)));
        }
    }
    let side = w.min(h) as f64;
    let mut tries = 0;
    let mut bg = 0;
    while bg < cfg.background && tries < cfg.background * 50 {
        tries += 1;
        let size = rng.random_range(0.08..0.9) * side;
        let aspect: f64 = rng.random_range(0.5f64.ln()..2.0f64.ln()).exp();
        let (bw, bh) = (
            (size * aspect.sqrt()).min(w as f64),
            (size / aspect.sqrt()).min(h as f64),
        );
        let x0 = rng.random_range(0.0..=(w as f64 - bw));
        let y0 = rng.random_range(0.0..=(h as f64 - bh));
        let p = BBox::new(x0, y0, x0 + bw, y0 + bh);
        if gts.iter().all(|(g, _)| g.iou(&p) < cfg.background_iou) {
            out.push(Sample {
                proposal: p,
                class_id: None,
                target: None,
            });
            bg += 1;
        }
    }
    out
}

/// `3×H×W` training image whose background is blended towards
/// `pixel_mean` under a random coarse mask.
pub fn blend_background<R: Rng + ?Sized>(
    rng: &mut R,
    scene: &Scene,
    pixel_mean: [f64; 3],
    cell: [usize; 2],
) -> Array3<f32> {
    let (h, w) = (scene.height(), scene.width());
    let stride = rng.random_range(cell[0].max(1)..=cell[1].max(cell[0]).max(1));
    let grid = Array2::from_shape_fn((h.div_ceil(stride), w.div_ceil(stride)), |_| {
        match rng.random_range(0..3) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0),
        }
    });
    let mut keep = upsample(grid.view(), stride, h, w);
    for inst in &scene.instances {
        keep.zip_mut_with(&dilate(&inst.mask, 1), |k, &m| {
            if m {
                *k = 1.0;
            }
        });
    }
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let k = keep[[y, x]];
        (scene.image[[y, x, c]] as f64 * k + pixel_mean[c] * (1.0 - k)) as f32
    })
}

fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

struct StepStats {
    cls: f64,
    boxl: f64,
    correct: usize,
    count: usize,
}

/// One forward/backward pass over a scene; accumulates parameter gradients
/// scaled by `scale`.
fn accumulate_scene(
    det: &mut Detector<f32>,
    scene: &Scene,
    img: &Array3<f32>,
    samples: &[Sample],
    cfg: &DetectorTrainConfig,
    scale: f64,
) -> Result<StepStats> {
    let props: Vec<BBox> = samples.iter().map(|s| s.proposal).collect();
    let (batch, tape) = det.forward_batch(img.view(), &props)?;
    let n = samples.len();
    let k = det.num_classes + 1;
    let mut gl = Array2::<f32>::zeros((n, k));
    let mut gb = Array2::<f32>::zeros((n, 4 * det.num_classes));
    let mut cls_loss = 0.0;
    let mut box_loss = 0.0;
    let mut correct = 0;
    for (i, s) in samples.iter().enumerate() {
        let label = s.class_id.map_or(0, |c| c + 1);
        let p = batch.probs.row(i);
        cls_loss -= (p[label] as f64).max(1e-12).ln();
        let argmax = (0..k).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
        correct += usize::from(argmax == label);
        for j in 0..k {
            let y = if j == label { 1.0 } else { 0.0 };
            gl[[i, j]] = ((p[j] as f64 - y) * scale / n as f64) as f32;
        }
        if let (Some(c), Some(t)) = (s.class_id, s.target) {
            let target = det.coder.encode(&t, &s.proposal)?;
            for d in 0..4 {
                let diff = batch.boxes[[i, 4 * c + d]] as f64 - target[d];
                let (l, g) = smooth_l1(diff, cfg.smooth_l1_beta);
                box_loss += l;
                gb[[i, 4 * c + d]] = (cfg.box_loss_weight * g * scale / n as f64) as f32;
            }
        }
    }
    let cls_loss = cls_loss / n as f64;
    let box_loss = box_loss / n as f64;
    if !(cls_loss.is_finite() && box_loss.is_finite()) {
        return Err(Error::NonFinite(format!(
            "detector loss diverged on scene seed {} (cls {cls_loss}, box {box_loss})",
            scene.seed
        )));
    }
    det.backward_params(&tape, &gl, &gb);
    Ok(StepStats {
        cls: cls_loss,
        boxl: box_loss,
        correct,
        count: n,
    })
}

/// Trains a detector on `scenes` with jittered ground-truth proposals and
/// random background boxes. `pixel_mean` is the training-split channel mean.
pub fn train_detector(
    scenes: &[Scene],
    num_classes: usize,
    pixel_mean: [f64; 3],
    cfg: &DetectorTrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<(Detector<f32>, TrainingLog)> {
    if scenes.len() < cfg.min_scenes {
        return Err(Error::Config(format!(
            "detector training needs at least {} scenes, got {}",
            cfg.min_scenes,
            scenes.len()
        )));
    }
    let mut det = Detector::<f32>::new(
        cfg.model.clone(),
        num_classes,
        pixel_mean,
        derive_seed(cfg.seed, 0xde7),
    );
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5a));
    let mut log = TrainingLog::default();
    let total_steps = (cfg.epochs * scenes.len().div_ceil(cfg.batch_images.max(1))).max(1);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..cfg.epochs {
        // Fisher-Yates with the run RNG keeps the order reproducible.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let (mut cls, mut boxl, mut correct, mut count, mut nsc) =
            (0.0, 0.0, 0usize, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_images.max(1)) {
            det.zero_grad();
            for &idx in chunk {
                let samples = sample_proposals(&mut rng, &scenes[idx], cfg);
                let img = if rng.random::<f64>() < cfg.background_blend {
                    blend_background(&mut rng, &scenes[idx], pixel_mean, cfg.blend_cell)
                } else {
                    scenes[idx].chw::<f32>()
                };
                let st = accumulate_scene(
                    &mut det,
                    &scenes[idx],
                    &img,
                    &samples,
                    cfg,
                    1.0 / chunk.len() as f64,
                )?;
                cls += st.cls;
                boxl += st.boxl;
                correct += st.correct;
                count += st.count;
                nsc += 1;
            }
            // cosine decay
            let t = opt.steps_taken() as f64 / total_steps as f64;
            opt.config.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
            opt.step(&mut det.params_mut());
        }
        let entry = EpochLog {
            epoch,
            loss: (cls + cfg.box_loss_weight * boxl) / nsc.max(1) as f64,
            cls_loss: cls / nsc.max(1) as f64,
            box_loss: boxl / nsc.max(1) as f64,
            accuracy: correct as f64 / count.max(1) as f64,
        };
        progress(&entry);
        log.epochs.push(entry);
    }
    Ok((det, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, GeneratorConfig};

    fn tiny_scenes(n: usize) -> Vec<Scene> {
        let g = GeneratorConfig {
            width: 64,
            height: 64,
            ..Default::default()
        };
        (0..n)
            .map(|i| generate_scene(&g, derive_seed(3, i as u64)).unwrap())
            .collect()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let scenes = tiny_scenes(4);
        let cfg = DetectorTrainConfig {
            epochs: 1,
            lr: 0.0,
            min_scenes: 1,
            ..Default::default()
        };
        let (mut trained, _) = train_detector(&scenes, 5, [0.5; 3], &cfg, |_| {}).unwrap();
        let mut fresh =
            Detector::<f32>::new(cfg.model.clone(), 5, [0.5; 3], derive_seed(cfg.seed, 0xde7));
        for (a, b) in trained.params_mut().iter().zip(fresh.params_mut().iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn too_few_scenes_is_rejected() {
        let scenes = tiny_scenes(2);
        let cfg = DetectorTrainConfig::default();
        assert!(matches!(
            train_detector(&scenes, 5, [0.5; 3], &cfg, |_| {}),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let scenes = tiny_scenes(6);
        let cfg = DetectorTrainConfig {
            epochs: 2,
            min_scenes: 1,
            ..Default::default()
        };
        let (_, a) = train_detector(&scenes, 5, [0.5; 3], &cfg, |_| {}).unwrap();
        let (_, b) = train_detector(&scenes, 5, [0.5; 3], &cfg, |_| {}).unwrap();
        assert!((a.final_loss().unwrap() - b.final_loss().unwrap()).abs() < 1e-3);
    }

    #[test]
    fn blending_keeps_instances_intact() {
        let scenes = tiny_scenes(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = blend_background(&mut rng, &scenes[0], [0.5; 3], [4, 8]);
        let orig = scenes[0].chw::<f32>();
        for inst in &scenes[0].instances {
            for ((y, x), &m) in inst.mask.indexed_iter() {
                if m {
                    for c in 0..3 {
                        assert_eq!(img[[c, y, x]], orig[[c, y, x]]);
                    }
                }
            }
        }
    }

    #[test]
    fn proposals_are_labelled_by_overlap() {
        let scenes = tiny_scenes(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DetectorTrainConfig::default();
        for s in &scenes {
            for smp in sample_proposals(&mut rng, s, &cfg) {
                let best = s
                    .instances
                    .iter()
                    .map(|i| i.bbox.iou(&smp.proposal))
                    .fold(0.0, f64::max);
                assert_eq!(smp.class_id.is_some(), best >= cfg.positive_iou);
            }
        }
    }
}
