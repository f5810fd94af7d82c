//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Build a [`Tape`], register parameters with [`Tape::param`], compose
//! primitives, then call [`Tape::backward`] on a scalar loss. [`adam_step`]
//! and [`cosine_lr`] cover the optimiser side.

mod error;
mod optim;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use optim::{adam_step, cosine_lr, AdamState};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;
