//! Dense 64-bit tensors, a reverse-mode tape over a fixed op catalog, and a
//! central-difference gradient checker.
//!
//! One [`Tape`] records one training step. Leaves created with
//! [`Tape::param`] receive gradients; [`Tape::constant`] leaves do not.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use tape::{cosine, Gradients, OpKind, Tape, Var, NORM_EPS};
pub use tensor::Tensor;
