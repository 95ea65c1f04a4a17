//! Desk-scale knowledge distillation for one-stage object detection.
//!
//! A self-contained toolkit built around a miniature anchor-based detector
//! and a synthetic shapes benchmark: tensor numerics with reverse-mode
//! autodiff, detector training with focal + smooth-L1 losses, distillation
//! losses (soft labels, feature imitation with selectable masks, rank
//! mimicking and prediction-guided feature imitation), diagnostics that
//! quantify teacher/student behaviour differences, and a CLI harness.

pub mod data;
pub mod detector;
pub mod diagnostics;
pub mod distill;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod testutil;

pub use error::{Error, Result};
