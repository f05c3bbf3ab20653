//! Diagnostic studies: relative positions of attributed pixels, gradient
//! baselines, stride/noise/λ ablations, and their figures and tables.

pub mod plot;
mod position;
mod saliency;
mod studies;

pub use plot::{heatmap, line_chart, Canvas, Provenance, Series};
pub use position::{
    density, head_position_study, radial_profile, relative_position, HeadPositions, MaskGeometry,
    RelativePosition,
};
pub use saliency::{
    default_thresholds, localization_accuracy, mass_inside, max_normalize, simple_grad,
    smooth_grad, Localization, GRADIENT_SCALAR,
};
pub use studies::{
    area_ratios, bucket_iou, comparator_strides, corrupt_boxes, growth_ratio, indicator,
    loss_curves, mask_iou, noise_csv, non_increasing_in_noise, percentile, pseudo_quality,
    stride_table, LossCurves, NoisePoint, PseudoQuality, SizeBuckets, StrideTable, BUCKET_NAMES,
};
