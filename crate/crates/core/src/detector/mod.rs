//! Two-stage detector: box geometry, the differentiable model, training,
//! dense-grid inference, evaluation, and checkpoints.

pub mod boxes;
mod checkpoint;
mod infer;
mod model;
mod train;

pub use boxes::{decode_box, encode_box, nms, BBox, BoxCoder, Offsets};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION,
};
pub use infer::{
    box_matches, evaluate_detector, grid_proposals, infer, Detection, DetectorEval, InferConfig,
};
pub use model::{
    BackboneCache, Detector, DetectorConfig, DetectorTape, HeadBatch, HeadCache, HeadGrad,
    HeadModel, HeadOutputs, BACKBONE_STRIDE,
};
pub use train::{
    blend_background, jitter_once, sample_proposals, train_detector, DetectorTrainConfig, EpochLog,
    Sample, TrainingLog,
};
