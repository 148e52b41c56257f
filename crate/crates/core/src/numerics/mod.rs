//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference checker.

mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{conv1d, layer_norm, masked_softmax_rows, softmax};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, Tensor};
