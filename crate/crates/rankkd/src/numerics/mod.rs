//! Minimal dense-tensor arithmetic with reverse-mode autodiff, a
//! finite-difference gradient oracle, SGD, and the on-disk tensor format.

pub mod gradcheck;
pub mod io;
pub mod sgd;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, ScalarLossFn};
pub use sgd::{sgd_step, SgdState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
