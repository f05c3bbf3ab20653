//! Perturbation masks that preserve detector predictions.

mod instance;
mod mask;
mod optimize;
mod probe;

pub use instance::{bbam_for_instance, predicted_area_ratio, InstanceBbam};
pub use mask::{
    adaptive_stride, perturb, upsample, upsample_backward, AttributionMask, StridePolicy,
};
pub use optimize::{
    loss_and_grad, optimize_mask, perturb_loss, regularizer, smoothed, total_loss, BbamConfig,
    HeadLosses, Heads, IterationLog, MaskOptimization, Target,
};
pub use probe::LinearProbe;
