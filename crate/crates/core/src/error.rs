use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing modality: {0}")]
    MissingModality(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("non-finite component at index {index}")]
    NonFinite { index: usize },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("store is empty")]
    EmptyStore,

    #[error("requested rank {requested} exceeds maximum {max}")]
    Rank { requested: usize, max: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("cannot form {k} clusters from {n} points")]
    Cardinality { k: usize, n: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{0}")]
    State(String),

    #[error("corrupt store file {path}: {message}")]
    CorruptStore { path: PathBuf, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code: 1 for user-facing errors, 2 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Serialize(_) | Error::CorruptStore { .. } => 2,
            Error::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }
}
