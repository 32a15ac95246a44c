use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed dependency tree in sentence {sentence_id}: {reason}")]
    MalformedTree { sentence_id: String, reason: String },

    #[error("dangling reference: {kind} `{id}` is not defined")]
    DanglingReference { kind: &'static str, id: String },

    #[error("embedding provider failed for element `{element}`: {reason}")]
    ProviderFailure { element: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("provider returned a zero vector for element `{element}`")]
    ZeroVector { element: String },

    #[error("query has neither a text nor an image component")]
    EmptyQuery,

    #[error("no graph node was activated by the query")]
    AllZeroActivation,

    #[error("gold set references unknown chunk `{chunk_id}` (query `{query_id}`)")]
    UnknownChunkId { query_id: String, chunk_id: String },

    #[error("{file}:{line}: {message}")]
    Schema {
        file: String,
        line: usize,
        message: String,
    },

    #[error("corrupt index file {}: {reason}", file.display())]
    CorruptIndex { file: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown preset `{name}` (available: {available})")]
    UnknownPreset { name: String, available: String },

    #[error("index directory {} is locked by another build", .0.display())]
    Locked(PathBuf),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(file: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Schema {
            file: file.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn corrupt(file: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptIndex {
            file: file.into(),
            reason: reason.into(),
        }
    }
}
