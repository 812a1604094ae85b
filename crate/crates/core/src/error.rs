use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing dataset file {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("{}:{line}: expected {expected} tab-separated fields, found {found}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("knowledge graph already carries inverse relations")]
    AlreadyAugmented,

    #[error("resplit ratio {0} must lie strictly between 0 and 0.5")]
    InvalidRatio(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("non-finite {what} ({context})")]
    NonFinite { what: String, context: String },

    #[error("unknown entity: {0}")]
    UnknownEntity(String),

    #[error("unknown relation: {0}")]
    UnknownRelation(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
