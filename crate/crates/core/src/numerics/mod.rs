//! Dense `f64` tensors, a reverse-mode tape, gradient checking, Adam and the
//! warmup learning-rate schedule.
//!
//! Every forward primitive validates shapes and refuses to produce NaN or
//! infinite values, so a diverging training step fails at the op that broke
//! rather than several steps later.

mod gradcheck;
mod kernels;
mod optim;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_inputs, relative_error, GradCheckReport};
pub use optim::{AdamConfig, AdamState, LrSchedule};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("precondition violated: {0}")]
    Precondition(&'static str),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
}

#[cfg(test)]
mod tests;
