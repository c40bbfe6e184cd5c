use std::path::PathBuf;

use thiserror::Error;

/// Broad failure class, used by the command-line driver to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) => ErrorClass::Config,
            Error::LengthMismatch { .. } | Error::Shape(_) | Error::Format(_) | Error::Io { .. } => {
                ErrorClass::Data
            }
            Error::Numerical(_) => ErrorClass::Numerical,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, actual })
    }
}
