use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
///
/// The CLI maps variants onto exit codes via [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },

    #[error("record {index}: {message}")]
    Validation { index: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("enumeration guard tripped: {leaves} leaves exceed the limit of {limit}")]
    Enumeration { leaves: u128, limit: u128 },

    #[error("support violation: {0}")]
    Support(String),

    #[error("standardization error: {0}")]
    Standardization(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("bound check failed: {0}")]
    BoundViolated(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// 0 ok, 1 validation, 2 I/O, 3 capability.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Enumeration { .. } | Error::Support(_) => 3,
            _ => 1,
        }
    }
}
