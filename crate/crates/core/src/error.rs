use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DgadError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss term `{term}` at iteration {iteration}: {detail}")]
    NonFinite {
        term: String,
        iteration: u64,
        detail: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error at {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, DgadError>;

impl DgadError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DgadError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for DgadError {
    fn from(e: serde_json::Error) -> Self {
        DgadError::Serde(e.to_string())
    }
}
