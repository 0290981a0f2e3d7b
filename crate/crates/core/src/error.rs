use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Index {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{format} decode error: {reason}")]
    Decode {
        format: &'static str,
        reason: String,
    },

    #[error("taxonomy error: {0}")]
    Taxonomy(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config mismatch: {}", .0.join("; "))]
    ConfigMismatch(Vec<String>),

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
