//! Semantic mIoU, instance AP at IoU thresholds, and average best overlap.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{self, BinaryMask};

/// Label value excluded from loss and metric computations.
pub const IGNORE_LABEL: u8 = 255;

/// Thresholds reported individually in an [`EvalReport`].
pub const AP_THRESHOLDS: [f64; 4] = [0.25, 0.5, 0.7, 0.75];

/// Predictions and ground truth of one image for instance matching.
#[derive(Debug, Clone, Default)]
pub struct ImageMatches {
    pub pred_classes: Vec<usize>,
    pub pred_scores: Vec<f64>,
    pub gt_classes: Vec<usize>,
    /// `ious[[p, g]]` between prediction `p` and ground truth `g`.
    pub ious: Array2<f64>,
}

impl ImageMatches {
    /// Builds the IoU table from instance masks.
    pub fn from_masks(preds: &[(usize, f64, &BinaryMask)], gts: &[(usize, &BinaryMask)]) -> Self {
        let ious = Array2::from_shape_fn((preds.len(), gts.len()), |(p, g)| {
            masks::iou(preds[p].2, gts[g].1)
        });
        Self {
            pred_classes: preds.iter().map(|p| p.0).collect(),
            pred_scores: preds.iter().map(|p| p.1).collect(),
            gt_classes: gts.iter().map(|g| g.0).collect(),
            ious,
        }
    }
}

/// All-point interpolated area under the precision/recall curve.
pub fn average_precision(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp_flags.len());
    let mut rec = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in tp_flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        prec.push(tp as f64 / (tp + fp) as f64);
        rec.push(tp as f64 / num_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// Class-averaged AP at IoU threshold `tau` with greedy score-ordered matching.
/// Classes without ground truth are skipped.
/// Per class: `(score, image, detection)` entries and the ground-truth count.
type ClassDetections = BTreeMap<usize, (Vec<(f64, usize, usize)>, usize)>;

pub fn mean_ap(images: &[ImageMatches], tau: f64) -> f64 {
    let mut classes = ClassDetections::new();
    for (img, m) in images.iter().enumerate() {
        for &c in &m.gt_classes {
            classes.entry(c).or_default().1 += 1;
        }
        for (p, (&c, &s)) in m.pred_classes.iter().zip(&m.pred_scores).enumerate() {
            classes.entry(c).or_default().0.push((s, img, p));
        }
    }
    let mut aps = Vec::new();
    for (c, (mut preds, num_gt)) in classes {
        if num_gt == 0 {
            continue;
        }
        preds.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used: Vec<Vec<bool>> = images
            .iter()
            .map(|m| vec![false; m.gt_classes.len()])
            .collect();
        let flags: Vec<bool> = preds
            .iter()
            .map(|&(_, img, p)| {
                let m = &images[img];
                let mut best: Option<(usize, f64)> = None;
                for (g, &gc) in m.gt_classes.iter().enumerate() {
                    if gc != c || used[img][g] {
                        continue;
                    }
                    let iou = m.ious[[p, g]];
                    if iou >= tau && best.is_none_or(|(_, b)| iou > b) {
                        best = Some((g, iou));
                    }
                }
                match best {
                    Some((g, _)) => {
                        used[img][g] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        aps.push(average_precision(&flags, num_gt));
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Mean over ground-truth instances of the best IoU with any prediction.
pub fn average_best_overlap(images: &[ImageMatches]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for m in images {
        for g in 0..m.gt_classes.len() {
            let best = (0..m.pred_classes.len())
                .map(|p| m.ious[[p, g]])
                .fold(0.0, f64::max);
            total += best;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Accumulates a pixel confusion matrix over label maps.
#[derive(Debug, Clone)]
pub struct Confusion {
    pub num_labels: usize,
    /// `counts[[gt, pred]]`
    pub counts: Array2<u64>,
}

impl Confusion {
    pub fn new(num_labels: usize) -> Self {
        Self {
            num_labels,
            counts: Array2::zeros((num_labels, num_labels)),
        }
    }

    pub fn add(&mut self, gt: ArrayView2<u8>, pred: ArrayView2<u8>) {
        for (&g, &p) in gt.iter().zip(pred.iter()) {
            if g == IGNORE_LABEL || (g as usize) >= self.num_labels {
                continue;
            }
            let p = (p as usize).min(self.num_labels - 1);
            self.counts[[g as usize, p]] += 1;
        }
    }

    /// IoU per label; `None` for labels absent from both GT and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_labels)
            .map(|c| {
                let tp = self.counts[[c, c]];
                let fn_ = self.counts.row(c).sum() - tp;
                let fp = self.counts.column(c).sum() - tp;
                let union = tp + fn_ + fp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> f64 {
        let v: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per label IoU (index 0 is background); `None` when the label never occurs.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    /// `(tau, AP_tau)` for each threshold in [`AP_THRESHOLDS`].
    pub ap: Vec<(f64, f64)>,
    /// AP averaged over `0.50:0.05:0.95`.
    pub ap_avg: f64,
    pub abo: f64,
}

impl EvalReport {
    pub fn ap_at(&self, tau: f64) -> Option<f64> {
        self.ap
            .iter()
            .find(|(t, _)| (t - tau).abs() < 1e-9)
            .map(|&(_, v)| v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s += &format!("miou,{:.6}\n", self.miou);
        for (i, v) in self.per_class_iou.iter().enumerate() {
            s += &format!(
                "iou_label_{i},{}\n",
                v.map_or("".into(), |x| format!("{x:.6}"))
            );
        }
        for (t, v) in &self.ap {
            s += &format!("ap_{:.0},{:.6}\n", t * 100.0, v);
        }
        s += &format!("ap_avg,{:.6}\nabo,{:.6}\n", self.ap_avg, self.abo);
        s
    }
}

/// Builds a full report from semantic maps and instance matches.
pub fn evaluate(confusion: &Confusion, instances: &[ImageMatches]) -> Result<EvalReport> {
    let num_gt: usize = instances.iter().map(|m| m.gt_classes.len()).sum();
    if confusion.counts.sum() == 0 && num_gt == 0 {
        return Err(Error::Empty("evaluation ground truth is empty".into()));
    }
    let ap = AP_THRESHOLDS
        .iter()
        .map(|&t| (t, mean_ap(instances, t)))
        .collect();
    let taus: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let ap_avg = taus.iter().map(|&t| mean_ap(instances, t)).sum::<f64>() / taus.len() as f64;
    Ok(EvalReport {
        per_class_iou: confusion.per_class_iou(),
        miou: confusion.mean_iou(),
        ap,
        ap_avg,
        abo: average_best_overlap(instances),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn one(iou: f64) -> ImageMatches {
        ImageMatches {
            pred_classes: vec![0],
            pred_scores: vec![0.9],
            gt_classes: vec![0],
            ious: arr2(&[[iou]]),
        }
    }

    #[test]
    fn hand_computed_single_match() {
        let m = [one(0.6)];
        assert_eq!(mean_ap(&m, 0.5), 1.0);
        assert_eq!(mean_ap(&m, 0.7), 0.0);
        assert!((average_best_overlap(&m) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_disjoint_predictions() {
        let gt = arr2(&[[0u8, 1, 1], [0, 2, 2]]);
        let mut c = Confusion::new(3);
        c.add(gt.view(), gt.view());
        assert_eq!(c.mean_iou(), 1.0);
        let mut d = Confusion::new(3);
        d.add(gt.view(), arr2(&[[1u8, 0, 0], [2, 0, 0]]).view());
        let ious = d.per_class_iou();
        assert_eq!(ious[1], Some(0.0));
        assert_eq!(ious[2], Some(0.0));
        assert_eq!(average_best_overlap(&[one(0.0)]), 0.0);
        let r = evaluate(&c, &[one(1.0)]).unwrap();
        assert!(r.ap.iter().all(|&(_, v)| v == 1.0) && r.abo == 1.0 && r.ap_avg == 1.0);
    }

    #[test]
    fn duplicate_detection_counts_as_false_positive() {
        let m = ImageMatches {
            pred_classes: vec![0, 0],
            pred_scores: vec![0.9, 0.8],
            gt_classes: vec![0],
            ious: arr2(&[[0.9], [0.8]]),
        };
        assert_eq!(mean_ap(&[m], 0.5), 1.0);
        let m = ImageMatches {
            pred_classes: vec![0, 0],
            pred_scores: vec![0.9, 0.8],
            gt_classes: vec![0],
            ious: arr2(&[[0.1], [0.8]]),
        };
        assert!((mean_ap(&[m], 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        assert!(evaluate(&Confusion::new(2), &[]).is_err());
    }

    #[test]
    fn ignore_pixels_are_skipped() {
        let gt = arr2(&[[IGNORE_LABEL, 1]]);
        let mut c = Confusion::new(2);
        c.add(gt.view(), arr2(&[[0u8, 1]]).view());
        assert_eq!(c.mean_iou(), 1.0);
    }
}
