//! Recorded dense-matrix computation, reverse-mode gradients, Adam, and
//! finite-difference verification. All arithmetic is `f64`.

mod adam;
mod gradcheck;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_difference_check, GradCheckReport, GradChecker};
pub use tape::{GradFault, OpKind, Tape, Var};
