use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped so callers (notably the CLI) can map them onto exit
/// categories: contract/configuration problems, runtime failures, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A vector had the wrong length for the operation it was passed to.
    #[error("{context}: expected length {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A value violated a constructor or operation contract.
    #[error("invalid {field}: {reason}")]
    InvalidArgument { field: String, reason: String },

    /// A state vector picked up a non-finite entry during iteration.
    #[error("solver diverged: non-finite value in {vector} after iteration {iteration}")]
    Diverged {
        vector: &'static str,
        iteration: usize,
    },

    /// An attached observer rejected the state it was shown.
    #[error("observer check failed at iteration {iteration}: {detail}")]
    ObserverCheck { iteration: usize, detail: String },

    /// A file exists but its contents are not what the reader expects.
    #[error("{}: {detail}", path.display())]
    InvalidFile { path: PathBuf, detail: String },

    /// An underlying filesystem operation failed.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }

    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn bad_file(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::InvalidFile {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
