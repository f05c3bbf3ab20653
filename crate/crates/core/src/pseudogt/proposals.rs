use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbam::Target;
use crate::detector::{jitter_once, BBox, HeadModel};
use crate::error::{Error, Result};
use crate::nn::Real;

/// `n` boxes whose coordinates are moved independently and uniformly by up
/// to `rate` of the matching side length, clipped to the image.
pub fn jitter_box(
    gt: &BBox,
    rate: f64,
    n: usize,
    seed: u64,
    width: usize,
    height: usize,
) -> Vec<BBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| jitter_once(&mut rng, gt, rate, width, height))
        .collect()
}

/// Jittered proposals and the subset that preserves class and box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub proposals: Vec<BBox>,
    /// Indices into `proposals` of the positive members.
    pub positive: Vec<usize>,
    /// Targets captured on the unperturbed image, aligned with `positive`.
    pub targets: Vec<Target>,
}

impl ProposalSet {
    pub fn positive_fraction(&self) -> f64 {
        self.positive.len() as f64 / self.proposals.len().max(1) as f64
    }
}

/// IoU above which a regressed proposal counts as positive (strict).
pub const POSITIVE_IOU: f64 = 0.8;

/// Keeps the proposals for which the detector predicts `gt_class` and the
/// box decoded for `gt_class` overlaps `gt_box` with IoU strictly above
/// `iou_gate`.
pub fn select_positive<T: Real, D: HeadModel<T>>(
    detector: &D,
    image: ndarray::ArrayView3<T>,
    proposals: Vec<BBox>,
    gt_box: &BBox,
    gt_class: usize,
    iou_gate: f64,
) -> Result<ProposalSet> {
    let outs = detector.heads(image, &proposals)?;
    let mut positive = Vec::new();
    let mut targets = Vec::new();
    for (i, (o, p)) in outs.iter().zip(&proposals).enumerate() {
        if o.predicted_class() != Some(gt_class) {
            continue;
        }
        let b = detector.decode_class(o, gt_class, p)?;
        if b.iou(gt_box) > iou_gate {
            positive.push(i);
            targets.push(Target::capture(*p, gt_class, o));
        }
    }
    if positive.is_empty() {
        return Err(Error::NoPositiveProposals(format!(
            "none of {} jittered proposals keeps class {gt_class} with IoU > {iou_gate}; fall back to a box-fill label",
            proposals.len()
        )));
    }
    Ok(ProposalSet {
        proposals,
        positive,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_copies_the_box() {
        let b = BBox::new(10.0, 12.0, 50.0, 40.0);
        assert_eq!(jitter_box(&b, 0.0, 5, 1, 128, 128), vec![b; 5]);
    }

    #[test]
    fn jitter_is_seeded() {
        let b = BBox::new(10.0, 12.0, 50.0, 40.0);
        assert_eq!(
            jitter_box(&b, 0.3, 20, 7, 128, 128),
            jitter_box(&b, 0.3, 20, 7, 128, 128)
        );
        assert_ne!(
            jitter_box(&b, 0.3, 20, 7, 128, 128),
            jitter_box(&b, 0.3, 20, 8, 128, 128)
        );
    }
}
