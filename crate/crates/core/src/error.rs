use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("tape does not belong to this model: {0}")]
    StaleTape(String),

    #[error("split index {index} out of range for a {layers}-layer model")]
    InvalidSplit { index: usize, layers: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("activation cache is empty")]
    EmptyCache,

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{}: corrupt at byte {offset}: {reason}", path.display())]
    Corrupt {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("malformed trace: {0}")]
    Trace(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
