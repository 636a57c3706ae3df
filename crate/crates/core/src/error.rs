use std::path::PathBuf;

/// Error type shared by all benchmark modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("memory buffer is empty")]
    EmptyBuffer,

    #[error("{path}: bad {what} at byte offset {offset}: {detail}")]
    Format {
        path: PathBuf,
        what: &'static str,
        offset: u64,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
