use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error in {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("no mask found for image stem `{stem}` (expected {expected})")]
    MissingMask { stem: String, expected: PathBuf },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("missing weight tensor `{0}`")]
    MissingWeight(String),

    #[error("{0}")]
    Invalid(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("image codec error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("i/o error on {path}: {source}")]
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

    pub(crate) fn data(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 1,
            Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}
