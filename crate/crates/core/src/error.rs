use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("fixed point did not converge after {iterations} sweeps (last residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("time budget of {seconds:.1} s exceeded")]
    Timeout { seconds: f64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{context}: {source}")]
    Io {
        context: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Convergence,
    Timeout,
    Other,
}

impl ErrorKind {
    /// 2 for bad input, 3 for non-convergence, 4 for timeouts, 1 otherwise.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Convergence => 3,
            ErrorKind::Timeout => 4,
            ErrorKind::Other => 1,
        }
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Capacity(_) => ErrorKind::Config,
            Error::Convergence { .. } => ErrorKind::Convergence,
            Error::Timeout { .. } => ErrorKind::Timeout,
            _ => ErrorKind::Other,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into(),
            source,
        }
    }
}
