use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use super::boxes::{nms, BBox};
use super::model::{Detector, HeadModel};
use crate::error::Result;
use crate::nn::Real;
use crate::segtrain::metrics::{mean_ap, ImageMatches};
use crate::synthdata::Scene;

/// Dense-grid proposal and post-processing settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Proposal side lengths as fractions of the shorter image side.
    pub scales: Vec<f64>,
    /// Width / height ratios.
    pub aspects: Vec<f64>,
    /// Grid step as a fraction of the proposal side.
    pub step: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    /// Extra passes that re-score the regressed boxes.
    pub refine_passes: usize,
    pub max_detections: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            scales: vec![0.22, 0.4, 0.7],
            aspects: vec![0.5, 1.0, 2.0],
            step: 1.0 / 3.0,
            nms_iou: 0.5,
            score_threshold: 0.5,
            refine_passes: 1,
            max_detections: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Sliding-window proposals covering a `width`×`height` image.
pub fn grid_proposals(width: usize, height: usize, cfg: &InferConfig) -> Vec<BBox> {
    let (wf, hf) = (width as f64, height as f64);
    let side = wf.min(hf);
    let mut out = Vec::new();
    for &s in &cfg.scales {
        for &a in &cfg.aspects {
            let bw = (s * side * a.sqrt()).min(wf);
            let bh = (s * side / a.sqrt()).min(hf);
            let positions = |extent: f64, len: f64| -> Vec<f64> {
                let step = (cfg.step * len).max(1.0);
                let n = ((extent - len) / step).floor() as usize;
                // centre the grid so both borders get the same margin
                let offset = (extent - len - n as f64 * step) / 2.0;
                (0..=n).map(|i| offset + i as f64 * step).collect()
            };
            for y in positions(hf, bh) {
                for x in positions(wf, bw) {
                    out.push(BBox::new(x, y, x + bw, y + bh));
                }
            }
        }
    }
    out
}

fn score_boxes<T: Real>(
    det: &Detector<T>,
    image: ArrayView3<T>,
    boxes: &[BBox],
) -> Result<Vec<Detection>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let outs = det.heads(image, boxes)?;
    let mut dets = Vec::with_capacity(boxes.len());
    for (o, p) in outs.iter().zip(boxes) {
        if let Some(c) = o.predicted_class() {
            let b = det.decode(o, c, p)?.clip(w, h);
            if b.is_valid() && b.width() >= 1.0 && b.height() >= 1.0 {
                dets.push(Detection {
                    class_id: c,
                    score: o.class_prob(c).f64(),
                    bbox: b,
                });
            }
        }
    }
    Ok(dets)
}

/// Runs the detector over a dense proposal grid, regresses, re-scores, and
/// applies per-class NMS. Results are sorted by descending score.
pub fn infer<T: Real>(
    det: &Detector<T>,
    image: ArrayView3<T>,
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let grid = grid_proposals(w, h, cfg);
    // a low floor keeps candidates that regression may still rescue
    let floor = cfg.score_threshold.min(0.05);
    let mut dets: Vec<Detection> = score_boxes(det, image, &grid)?
        .into_iter()
        .filter(|d| d.score >= floor)
        .collect();
    for _ in 0..cfg.refine_passes {
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        if boxes.is_empty() {
            break;
        }
        dets = score_boxes(det, image, &boxes)?
            .into_iter()
            .filter(|d| d.score >= floor)
            .collect();
    }
    dets.retain(|d| d.score >= cfg.score_threshold);
    let mut kept = Vec::new();
    for c in 0..det.num_classes {
        let cls: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
        let boxes: Vec<BBox> = cls.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = cls.iter().map(|d| d.score).collect();
        kept.extend(
            nms(&boxes, &scores, cfg.nms_iou)
                .into_iter()
                .map(|i| *cls[i]),
        );
    }
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept.truncate(cfg.max_detections);
    Ok(kept)
}

/// Box-level detection metrics on a labelled split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorEval {
    pub ap50: f64,
    pub ap70: f64,
    /// Fraction of ground-truth boxes whose own proposal is classified correctly.
    pub gt_proposal_accuracy: f64,
    pub scenes: usize,
}

pub fn box_matches(dets: &[Detection], scene: &Scene) -> ImageMatches {
    let ious = Array2::from_shape_fn((dets.len(), scene.instances.len()), |(p, g)| {
        dets[p].bbox.iou(&scene.instances[g].bbox)
    });
    ImageMatches {
        pred_classes: dets.iter().map(|d| d.class_id).collect(),
        pred_scores: dets.iter().map(|d| d.score).collect(),
        gt_classes: scene.instances.iter().map(|i| i.class_id).collect(),
        ious,
    }
}

/// Evaluates AP50/AP70 of [`infer`] output; `cfg.score_threshold` should be
/// low (e.g. 0.05) so the precision/recall curve is complete.
pub fn evaluate_detector<T: Real>(
    det: &Detector<T>,
    scenes: &[Scene],
    cfg: &InferConfig,
) -> Result<DetectorEval> {
    let mut matches = Vec::with_capacity(scenes.len());
    let (mut correct, mut total) = (0usize, 0usize);
    for s in scenes {
        let img = s.chw::<T>();
        let dets = infer(det, img.view(), cfg)?;
        matches.push(box_matches(&dets, s));
        let gts: Vec<BBox> = s.instances.iter().map(|i| i.bbox).collect();
        if !gts.is_empty() {
            for (o, inst) in det.heads(img.view(), &gts)?.iter().zip(&s.instances) {
                correct += usize::from(o.predicted_class() == Some(inst.class_id));
                total += 1;
            }
        }
    }
    Ok(DetectorEval {
        ap50: mean_ap(&matches, 0.5),
        ap70: mean_ap(&matches, 0.7),
        gt_proposal_accuracy: correct as f64 / total.max(1) as f64,
        scenes: scenes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_stays_inside_image() {
        let cfg = InferConfig::default();
        let g = grid_proposals(128, 96, &cfg);
        assert!(!g.is_empty());
        for b in &g {
            assert!(
                b.x_min >= 0.0
                    && b.y_min >= 0.0
                    && b.x_max <= 128.0 + 1e-9
                    && b.y_max <= 96.0 + 1e-9
            );
        }
    }

    #[test]
    fn nms_keeps_one_of_identical_boxes() {
        let b = BBox::new(1.0, 1.0, 9.0, 9.0);
        assert_eq!(nms(&[b, b], &[0.9, 0.8], 0.5), vec![0]);
    }
}
