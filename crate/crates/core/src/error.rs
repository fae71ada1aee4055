use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: {message}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate api ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),

    #[error("invalid record {id:?}: {message}")]
    InvalidRecord { id: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown api id: {0}")]
    UnknownApi(String),

    /// A provider call failed. `retryable` marks transport-level failures
    /// (timeouts, 429, 5xx) that may succeed on a later attempt.
    #[error("provider error: {message}")]
    Provider { message: String, retryable: bool },

    #[error("unrecorded interaction: no cassette entry for prompt hash {hash}")]
    UnrecordedInteraction { hash: String },

    #[error("cassette {}: {message}", path.display())]
    Cassette { path: PathBuf, message: String },

    #[error("embedding failed for {id}: {source}")]
    EmbedRecord {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("could not parse summarizer output: {raw:?}")]
    Summarization { raw: String },

    #[error("index mismatch: {0}")]
    IndexMismatch(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn provider(message: impl Into<String>, retryable: bool) -> Self {
        Error::Provider {
            message: message.into(),
            retryable,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Provider { retryable: true, .. })
    }

    /// True for failures of a remote provider (network, HTTP status, bad
    /// payload). Replay misses are data errors, not transport errors.
    pub fn is_transport(&self) -> bool {
        match self {
            Error::Provider { .. } => true,
            Error::EmbedRecord { source, .. } => source.is_transport(),
            _ => false,
        }
    }
}
