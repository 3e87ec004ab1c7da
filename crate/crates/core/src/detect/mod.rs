//! Anchor-free rotated-box head, training loss, and AP evaluation.

mod eval;
mod head;
mod loss;

pub use eval::{average_precision, evaluate, ApResult, Metrics};
pub use head::{
    assign_targets, decode_cell, decode_detections, encode_box, format_detection, head_forward, regression_targets,
    Detection, HeadOutput, HeadParams, Targets, MAX_LOG_EXTENT,
};
pub use loss::{detection_loss, LossBreakdown, LossVars, DEFAULT_FOCUS_WEIGHT};
