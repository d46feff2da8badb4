use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: label out of range: {label} (expected 0..=3)")]
    LabelOutOfRange {
        path: PathBuf,
        line: usize,
        label: i64,
    },

    #[error("unknown {kind} id `{id}`")]
    UnknownId { kind: &'static str, id: String },

    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("unknown context attribute `{0}`")]
    UnknownAttribute(String),

    #[error("unrecognized format: {0}")]
    UnrecognizedFormat(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no trainable pairs")]
    NoTrainablePairs,

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
}

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

    /// True for failures of the numerical optimization rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}
