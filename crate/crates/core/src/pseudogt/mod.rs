//! Pseudo ground truth from attribution maps.

mod labels;
mod proposals;
mod refine;
mod segments;
mod trimap;

pub use labels::{
    attribute_scene, box_fill_labels, box_fill_trimap, build_pseudo_labels, foreground_masks,
    ground_truth_labels, instance_trimap, label_fractions, load_pseudo_labels, read_label_png,
    save_pseudo_labels, semantic_from_trimaps, write_label_png, InstanceAttribution, LabelConfig,
    SceneAttributions, ScenePseudoLabels,
};
pub use proposals::{jitter_box, select_positive, ProposalSet, POSITIVE_IOU};
pub use refine::{
    refine_with_proposals, selected_proposals, MaskProposalSet, ProposalOrigin, CONTAINMENT,
};
pub use segments::{builtin_mask_proposals, graph_segment, load_mask_proposals, SegmentConfig};
pub use trimap::{edge_refine, threshold_trimap, EdgeRefineConfig, Trimap, BG, FG, IGNORE};

use serde::{Deserialize, Serialize};

/// Proposal jittering around a ground-truth box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterConfig {
    pub rate: f64,
    pub count: usize,
    pub iou_gate: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            rate: 0.3,
            count: 20,
            iou_gate: POSITIVE_IOU,
        }
    }
}
