//! Dense tensors with first-order reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Tapes are
//! single-threaded and cheap to rebuild; the meta-learner builds a fresh one
//! per episode and per meta-iteration. Independent tapes run concurrently.

mod tape;
mod tensor;

pub mod fd;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

pub(crate) use tape::logsumexp_row;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid axis {axis} for {op} on shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("log of a non-positive value")]
    LogDomain,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}
