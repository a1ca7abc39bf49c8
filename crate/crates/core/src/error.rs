use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the model, data and training layers.
#[derive(Debug, Error)]
pub enum JrlError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("tape mismatch: {0}")]
    TapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("malformed attribute sequence: {0}")]
    MalformedSequence(String),

    #[error("k = {requested} exceeds available exemplar pool of {available}")]
    PoolTooSmall { requested: usize, available: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { expected: u32, found: u32 },

    #[error("checkpoint tensor {name} has shape {found:?}, configuration requires {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl JrlError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        JrlError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        JrlError::Json {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by a broken contract.
    pub fn is_io(&self) -> bool {
        matches!(self, JrlError::Io { .. })
    }
}

pub type Result<T, E = JrlError> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(JrlError::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
