use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::codec::FormatError;
use crate::data::DataError;

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("format: {0}")]
    Format(#[from] FormatError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("non-finite base loss at inner iteration {iteration}")]
    NonFiniteInner { iteration: usize },
    #[error("non-finite meta loss at epoch {epoch}, batch {batch}: {source}")]
    NonFiniteMeta {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Autodiff(AutodiffError::NonFinite { .. } | AutodiffError::LogDomain) => {
                ErrorKind::Numeric
            }
            Error::Autodiff(_) | Error::Config(_) => ErrorKind::Config,
            Error::Data(DataError::Format(_) | DataError::Io(_)) => ErrorKind::Io,
            Error::Data(_) => ErrorKind::Config,
            Error::Format(_) | Error::Io(_) => ErrorKind::Io,
            Error::NonFiniteInner { .. } | Error::NonFiniteMeta { .. } => ErrorKind::Numeric,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
