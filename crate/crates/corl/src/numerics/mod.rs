//! Dense tensors, reverse-mode differentiation, and gradient verification.
//!
//! Everything downstream builds on this module: the backbone, both
//! dictionaries, attention, and the training losses are compositions of the
//! primitives defined here, each of which carries a registered backward
//! rule.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradReport};
pub use tape::{Gradients, Padding, Tape, Var};
pub use tensor::{cosine_sim, l2_normalize, Tensor};

pub(crate) use tensor::cosine_sim_unchecked;

/// Norm guard used by every normalization in the crate.
pub const EPSILON: f64 = 1e-12;
