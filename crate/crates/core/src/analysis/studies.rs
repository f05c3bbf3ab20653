use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::plot::Provenance;
use crate::bbam::{smoothed, AttributionMask, StridePolicy};
use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::masks::{iou, BinaryMask};
use crate::pseudogt::{SceneAttributions, ScenePseudoLabels, IGNORE};
use crate::segtrain::{mean_ap, Confusion, ImageMatches};
use crate::synthdata::Scene;

/// Linear-interpolated quantile of `values` (`q` in `[0, 1]`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

fn box_area_ratio(b: &BBox, scene: &Scene) -> f64 {
    b.clip(scene.width(), scene.height()).area() / (scene.width() * scene.height()) as f64
}

/// Ground-truth box-area ratio of every instance, scene-major.
pub fn area_ratios(scenes: &[Scene]) -> Vec<f64> {
    scenes
        .iter()
        .flat_map(|s| s.instances.iter().map(move |i| box_area_ratio(&i.bbox, s)))
        .collect()
}

/// Small / medium / large split at the terciles of box-area ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeBuckets {
    pub edges: [f64; 2],
}

pub const BUCKET_NAMES: [&str; 3] = ["small", "medium", "large"];

impl SizeBuckets {
    pub fn from_scenes(scenes: &[Scene]) -> Self {
        let a = area_ratios(scenes);
        Self {
            edges: [percentile(&a, 1.0 / 3.0), percentile(&a, 2.0 / 3.0)],
        }
    }

    pub fn bucket(&self, ratio: f64) -> usize {
        if ratio < self.edges[0] {
            0
        } else if ratio < self.edges[1] {
            1
        } else {
            2
        }
    }
}

/// Fixed-stride comparators: the stride law evaluated at the 25th and 75th
/// percentile box-area ratios.
pub fn comparator_strides(scenes: &[Scene], policy: &StridePolicy) -> Result<(usize, usize)> {
    let a = area_ratios(scenes);
    if a.is_empty() {
        return Err(Error::Empty(
            "no instances to derive comparator strides".into(),
        ));
    }
    let (w, h) = (scenes[0].width(), scenes[0].height());
    Ok((
        policy.stride(percentile(&a, 0.25), w, h)?,
        policy.stride(percentile(&a, 0.75), w, h)?,
    ))
}

/// IoU between the thresholded (`>= threshold`) upsampled map and `gt`.
pub fn mask_iou(mask: &AttributionMask, gt: &BinaryMask, threshold: f64) -> f64 {
    iou(&mask.upsampled().mapv(|v| v >= threshold), gt)
}

/// Mean mask IoU per (stride policy, size bucket).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrideTable {
    pub policies: Vec<String>,
    pub buckets: SizeBuckets,
    pub counts: [usize; 3],
    /// `iou[p][b]`
    pub iou: Vec<[f64; 3]>,
    pub threshold: f64,
}

impl StrideTable {
    pub fn get(&self, policy: &str, bucket: usize) -> Option<f64> {
        self.policies
            .iter()
            .position(|p| p == policy)
            .map(|i| self.iou[i][bucket])
    }

    pub fn to_csv(&self, prov: &Provenance) -> String {
        let mut s = prov.csv_preamble(&[
            (
                "bucket_edges",
                format!("{:.5};{:.5}", self.buckets.edges[0], self.buckets.edges[1]),
            ),
            ("mask_threshold", self.threshold.to_string()),
        ]);
        s += "stride_policy,bucket,count,mean_iou\n";
        for (p, row) in self.policies.iter().zip(&self.iou) {
            for b in 0..3 {
                s += &format!("{p},{},{},{:.6}\n", BUCKET_NAMES[b], self.counts[b], row[b]);
            }
        }
        s
    }
}

/// Compares stride policies on the same instances. Instances without a map
/// in any variant are skipped for all of them.
pub fn stride_table(
    scenes: &[Scene],
    variants: &[(String, &[SceneAttributions])],
    buckets: SizeBuckets,
    threshold: f64,
) -> Result<StrideTable> {
    for (name, v) in variants {
        if v.len() != scenes.len() {
            return Err(Error::ShapeMismatch(format!(
                "variant {name}: {} attribution sets for {} scenes",
                v.len(),
                scenes.len()
            )));
        }
    }
    let mut sums = vec![[0.0; 3]; variants.len()];
    let mut counts = [0usize; 3];
    for (si, scene) in scenes.iter().enumerate() {
        for (ii, inst) in scene.instances.iter().enumerate() {
            let maps: Option<Vec<&AttributionMask>> = variants
                .iter()
                .map(|(_, v)| v[si].instances.get(ii).and_then(|a| a.mask.as_ref()))
                .collect();
            let Some(maps) = maps else { continue };
            let b = buckets.bucket(box_area_ratio(&inst.bbox, scene));
            counts[b] += 1;
            for (k, m) in maps.iter().enumerate() {
                sums[k][b] += mask_iou(m, &inst.mask, threshold);
            }
        }
    }
    let iou = sums
        .iter()
        .map(|r| {
            std::array::from_fn(|b| {
                if counts[b] > 0 {
                    r[b] / counts[b] as f64
                } else {
                    0.0
                }
            })
        })
        .collect();
    Ok(StrideTable {
        policies: variants.iter().map(|(n, _)| n.clone()).collect(),
        buckets,
        counts,
        iou,
        threshold,
    })
}

/// Per-iteration head losses averaged over instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub heads: String,
    pub box_loss: Vec<f64>,
    pub cls_loss: Vec<f64>,
}

pub fn loss_curves(heads: &str, attributions: &[SceneAttributions]) -> Result<LossCurves> {
    let trajs: Vec<_> = attributions
        .iter()
        .flat_map(|s| s.instances.iter())
        .filter(|a| a.mask.is_some() && !a.trajectory.is_empty())
        .map(|a| &a.trajectory)
        .collect();
    let Some(len) = trajs.iter().map(|t| t.len()).min() else {
        return Err(Error::Empty(format!(
            "no trajectories recorded for heads {heads}"
        )));
    };
    let n = trajs.len() as f64;
    let mean = |f: fn(&crate::bbam::IterationLog) -> f64| -> Vec<f64> {
        (0..len)
            .map(|i| trajs.iter().map(|t| f(&t[i])).sum::<f64>() / n)
            .collect()
    };
    Ok(LossCurves {
        heads: heads.into(),
        box_loss: mean(|l| l.box_loss),
        cls_loss: mean(|l| l.cls_loss),
    })
}

/// Ratio of the smoothed curve at its end to the smoothed curve at
/// iteration `early` (the all-ones start makes iteration 0 exactly zero).
pub fn growth_ratio(curve: &[f64], window: usize, early: usize) -> f64 {
    let s = smoothed(curve, window);
    match (s.get(early), s.last()) {
        (Some(&a), Some(&b)) if a > 0.0 => b / a,
        (Some(_), Some(&b)) if b > 0.0 => f64::INFINITY,
        _ => 0.0,
    }
}

/// Moves every box side outward (`fraction > 0`) or inward by `fraction`
/// of the box extent along that axis. Masks are untouched.
pub fn corrupt_boxes(scene: &Scene, fraction: f64) -> Scene {
    let mut out = scene.clone();
    let (w, h) = (scene.width() as f64, scene.height() as f64);
    for inst in &mut out.instances {
        let b = inst.bbox;
        let (dx, dy) = (fraction * b.width(), fraction * b.height());
        let (cx, cy) = b.center();
        let x0 = (b.x_min - dx).clamp(0.0, w).min(cx - 0.5);
        let x1 = (b.x_max + dx).clamp(0.0, w).max(cx + 0.5);
        let y0 = (b.y_min - dy).clamp(0.0, h).min(cy - 0.5);
        let y1 = (b.y_max + dy).clamp(0.0, h).max(cy + 0.5);
        inst.bbox = BBox::new(x0, y0, x1, y1);
    }
    out
}

/// Quality of pseudo labels against the ground truth they stand in for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoQuality {
    /// AP at IoU 0.5 of the foreground masks, scored by positive-proposal fraction.
    pub ap50: f64,
    pub mean_iou: f64,
    /// Semantic mIoU with ignore pixels counted as background.
    pub semantic_miou: f64,
    /// Share of foreground pixels that lie inside the instance's mask.
    pub precision: f64,
}

/// Scores are the positive-proposal fractions of `attributions` when given,
/// otherwise one.
pub fn pseudo_quality(
    scenes: &[Scene],
    labels: &[ScenePseudoLabels],
    attributions: Option<&[SceneAttributions]>,
    num_classes: usize,
) -> Result<PseudoQuality> {
    if labels.len() != scenes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} label sets for {} scenes",
            labels.len(),
            scenes.len()
        )));
    }
    let mut matches = Vec::with_capacity(scenes.len());
    let mut conf = Confusion::new(num_classes + 1);
    let (mut iou_sum, mut n, mut inside, mut fg) = (0.0, 0usize, 0usize, 0usize);
    for (si, (scene, lab)) in scenes.iter().zip(labels).enumerate() {
        let masks: Vec<BinaryMask> = lab.instances.iter().map(|t| t.foreground()).collect();
        let preds: Vec<(usize, f64, &BinaryMask)> = lab
            .instances
            .iter()
            .zip(&masks)
            .enumerate()
            .map(|(k, (t, m))| {
                let score = attributions
                    .and_then(|a| a[si].instances.get(k))
                    .map_or(1.0, |a| a.positive_fraction);
                (t.class_id, score, m)
            })
            .collect();
        let gts: Vec<(usize, &BinaryMask)> = scene
            .instances
            .iter()
            .map(|i| (i.class_id, &i.mask))
            .collect();
        matches.push(ImageMatches::from_masks(&preds, &gts));
        for (t, m) in lab.instances.iter().zip(&masks) {
            if let Some(g) = scene.instances.get(t.instance_id) {
                iou_sum += iou(m, &g.mask);
                n += 1;
                fg += m.iter().filter(|&&v| v).count();
                inside += m
                    .iter()
                    .zip(g.mask.iter())
                    .filter(|(&a, &b)| a && b)
                    .count();
            }
        }
        let pred = lab.semantic.mapv(|v| if v == IGNORE { 0 } else { v });
        conf.add(crate::synthdata::semantic_labels(scene).view(), pred.view());
    }
    if n == 0 {
        return Err(Error::Empty("no pseudo-labelled instances".into()));
    }
    Ok(PseudoQuality {
        ap50: mean_ap(&matches, 0.5),
        mean_iou: iou_sum / n as f64,
        semantic_miou: conf.mean_iou(),
        precision: if fg > 0 {
            inside as f64 / fg as f64
        } else {
            0.0
        },
    })
}

/// Mean foreground IoU of pseudo masks per size bucket.
pub fn bucket_iou(
    scenes: &[Scene],
    labels: &[ScenePseudoLabels],
    buckets: SizeBuckets,
) -> ([f64; 3], [usize; 3]) {
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for (scene, lab) in scenes.iter().zip(labels) {
        for t in &lab.instances {
            if let Some(g) = scene.instances.get(t.instance_id) {
                let b = buckets.bucket(box_area_ratio(&g.bbox, scene));
                sums[b] += iou(&t.foreground(), &g.mask);
                counts[b] += 1;
            }
        }
    }
    (
        std::array::from_fn(|b| {
            if counts[b] > 0 {
                sums[b] / counts[b] as f64
            } else {
                0.0
            }
        }),
        counts,
    )
}

/// AP at one noise level; negative levels shrink the boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub level: f64,
    pub ap50: f64,
}

/// `true` when AP never rises by more than `tolerance` as `|level|` grows
/// within each polarity (the clean point belongs to both).
pub fn non_increasing_in_noise(points: &[NoisePoint], tolerance: f64) -> bool {
    let branch = |sign: f64| {
        let mut v: Vec<&NoisePoint> = points
            .iter()
            .filter(|p| p.level == 0.0 || p.level.signum() == sign)
            .collect();
        v.sort_by(|a, b| a.level.abs().total_cmp(&b.level.abs()));
        v.windows(2).all(|w| w[1].ap50 <= w[0].ap50 + tolerance)
    };
    branch(1.0) && branch(-1.0)
}

pub fn noise_csv(points: &[NoisePoint], prov: &Provenance) -> String {
    let mut s = prov.csv_preamble(&[("detector", "reused clean-trained detector".into())]);
    s += "polarity,noise_level,ap50\n";
    let mut v = points.to_vec();
    v.sort_by(|a, b| a.level.total_cmp(&b.level));
    for p in v {
        let pol = if p.level > 0.0 {
            "expanded"
        } else if p.level < 0.0 {
            "contracted"
        } else {
            "clean"
        };
        s += &format!("{pol},{:.2},{:.6}\n", p.level, p.ap50);
    }
    s
}

/// Map of booleans as `0/1` floats.
pub fn indicator(mask: &BinaryMask) -> Array2<f64> {
    mask.mapv(|v| if v { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 4.0);
        assert!((percentile(&v, 0.5) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn noise_monotonicity() {
        let p = |level, ap50| NoisePoint { level, ap50 };
        let good = [
            p(0.0, 0.8),
            p(0.1, 0.7),
            p(0.2, 0.71),
            p(-0.1, 0.75),
            p(-0.2, 0.5),
        ];
        assert!(non_increasing_in_noise(&good, 0.02));
        let bad = [p(0.0, 0.8), p(-0.1, 0.6), p(-0.2, 0.7)];
        assert!(!non_increasing_in_noise(&bad, 0.02));
    }

    #[test]
    fn growth_of_curves() {
        let c: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert!(growth_ratio(&c, 1, 10) > 9.0);
        assert_eq!(growth_ratio(&[0.0; 20], 5, 10), 0.0);
    }
}
