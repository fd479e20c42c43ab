//! Dense tensors, reverse-mode differentiation, seeded randomness.

pub mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use rng::Rng;
pub use tape::{grad, GradReport, Gradients, Reduction, Tape, Var, TARGET_SIMPLEX_TOL};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use tape::softmax_raw;
