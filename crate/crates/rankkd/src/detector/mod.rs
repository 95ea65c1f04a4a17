//! Miniature RetinaNet-style one-stage detector: anchors, label assignment,
//! forward pass, task losses, box codec, NMS, and AP evaluation.

pub mod anchors;
pub mod boxes;
pub mod eval;
pub mod losses;
pub mod model;

pub use anchors::{assign_labels, generate_anchors, AnchorSet, AnchorStatus, Assignment};
pub use boxes::{decode_boxes, encode_boxes, iou, nms, BBox, Detection};
pub use eval::{detect, evaluate_ap, ApReport};
pub use losses::{focal_loss, smooth_l1_loss};
pub use model::{DetectorModel, ModelConfig, PredictionVars, PyramidVars};
