//! Dense tensors and reverse-mode differentiation.

mod dense;
pub mod gradcheck;
mod tape;

pub use dense::Tensor;
pub use tape::{log_sum_exp, sigmoid, Gradients, Reduce, Tape, Var, NORM_FLOOR};
