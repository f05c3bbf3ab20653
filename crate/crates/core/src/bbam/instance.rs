use ndarray::ArrayView3;
use serde::{Deserialize, Serialize};

use super::optimize::{optimize_mask, BbamConfig, IterationLog};
use super::AttributionMask;
use crate::detector::{BBox, HeadModel};
use crate::error::Result;
use crate::nn::Real;
use crate::pseudogt::{jitter_box, select_positive, JitterConfig, ProposalSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceBbam {
    pub mask: AttributionMask,
    pub proposals: ProposalSet,
    /// Box-area / image-area ratio that drove the stride choice.
    pub area_ratio: f64,
    pub trajectory: Vec<IterationLog>,
}

/// Ratio of the box regressed from `box_` itself to the image area.
pub fn predicted_area_ratio<T: Real, D: HeadModel<T>>(
    detector: &D,
    image: ArrayView3<T>,
    box_: &BBox,
    class_id: usize,
) -> Result<f64> {
    let (_, h, w) = image.dim();
    let out = detector.heads(image, std::slice::from_ref(box_))?;
    let pred = detector.decode_class(&out[0], class_id, box_)?.clip(w, h);
    let area = if pred.is_valid() {
        pred.area()
    } else {
        box_.clip(w, h).area()
    };
    Ok((area / (w * h) as f64).clamp(0.0, 1.0))
}

/// Jitters `box_`, keeps the positive proposals, and optimizes one mask that
/// preserves all of them.
#[allow(clippy::too_many_arguments)]
pub fn bbam_for_instance<T: Real, D: HeadModel<T>>(
    detector: &D,
    image: ArrayView3<T>,
    mean: [f64; 3],
    box_: &BBox,
    class_id: usize,
    jitter: &JitterConfig,
    config: &BbamConfig,
    seed: u64,
) -> Result<InstanceBbam> {
    let (_, h, w) = image.dim();
    box_.validate()?;
    let proposals = jitter_box(box_, jitter.rate, jitter.count, seed, w, h);
    let set = select_positive(detector, image, proposals, box_, class_id, jitter.iou_gate)?;
    let area_ratio = predicted_area_ratio(detector, image, box_, class_id)?;
    let stride = config.stride.stride(area_ratio, w, h)?;
    let opt = optimize_mask(detector, image, mean, &set.targets, stride, config)?;
    Ok(InstanceBbam {
        mask: opt.mask,
        proposals: set,
        area_ratio,
        trajectory: opt.trajectory,
    })
}
