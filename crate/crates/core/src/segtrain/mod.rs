//! Segmentation training on pseudo labels and evaluation metrics.

mod checkpoint;
mod instance;
pub mod metrics;
mod model;
mod train;

pub use checkpoint::{load_seg_model, save_seg_model, SEG_CHECKPOINT_VERSION};
pub use instance::{
    box_probability, crop_image, crop_labels, crop_region, evaluate_instance_model, paste_mask,
    predict_instances, semantic_from_instances, train_instance_seg, CropConfig, SEMANTIC_MIN_SCORE,
};
pub use metrics::{
    average_best_overlap, average_precision, evaluate, mean_ap, Confusion, EvalReport,
    ImageMatches, AP_THRESHOLDS, IGNORE_LABEL,
};
pub use model::{argmax_labels, SegModel, SegModelConfig, SegTape};
pub use train::{
    evaluate_model, evaluate_predictions, ignore_aware_loss, instances_from_semantic, train_seg,
    SegEpochLog, SegMode, SegTrainConfig,
};
