//! Few-shot classification with a meta-learned iterative base learner.
//!
//! An embedding network maps inputs to spatial feature blocks; a linear head
//! is fitted per episode by a fixed number of steepest-descent steps on a
//! parameterized least-squares objective with closed-form step lengths, and
//! the whole unrolled procedure is differentiated to train the embedding and
//! the objective's own parameters.

pub mod autodiff;
pub(crate) mod codec;
pub mod data;
pub mod desk;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod exec;
pub mod learner;
pub mod meta;
pub mod objective;
pub mod verify;

pub use codec::FormatError;
pub use error::{Error, ErrorKind, Result};
