use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the engine can report.
///
/// The variants are grouped by the exit-code class the command-line front end
/// maps them to (see [`Error::class`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    /// A non-finite loss or activation stopped training; carries the last
    /// finite step report.
    #[error("training diverged at epoch {epoch}, step {step}: {cause}")]
    Diverged {
        epoch: usize,
        step: usize,
        cause: String,
        last_finite: Option<Box<crate::objectives::LossReport>>,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error classes, one per distinct process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    File,
    Integrity,
    Numeric,
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Contract(_) => ErrorClass::Usage,
            Error::Io { .. } => ErrorClass::File,
            Error::Numeric(_) | Error::Diverged { .. } => ErrorClass::Numeric,
            Error::Dimension { .. } | Error::State(_) | Error::Parse { .. } | Error::Integrity(_) => {
                ErrorClass::Integrity
            }
        }
    }
}
