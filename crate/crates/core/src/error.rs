use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user-facing configuration: missing directories, unknown keys, out-of-range values.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported backbone: {0}")]
    UnsupportedBackbone(String),

    #[error("non-finite value in {what} at iteration {iteration}")]
    NonFinite { what: String, iteration: u64 },

    #[error("label mismatch: {0}")]
    Label(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::InvalidInput(_) => "invalid-input",
            Error::Shape(_) => "shape",
            Error::UnsupportedBackbone(_) => "unsupported-backbone",
            Error::NonFinite { .. } => "non-finite",
            Error::Label(_) => "label",
            Error::Io { .. } => "io",
            Error::Codec { .. } => "codec",
            Error::Checkpoint(_) => "checkpoint",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
        }
    }
}
