use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("{location}: dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch {
        location: String,
        expected: usize,
        found: usize,
    },

    #[error("{location}: duplicate image_id {image_id:?}")]
    DuplicateImageId { location: String, image_id: String },

    #[error("{location}: malformed record: {message}")]
    Malformed { location: String, message: String },

    #[error("{0}: empty embedding set")]
    EmptySet(String),

    #[error("non-finite value in {what} for image {image_id:?}")]
    NonFinite { what: String, image_id: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence(_) => 4,
            Error::Io { .. } => 1,
            _ => 3,
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Divergence(_) => "divergence",
            Error::Io { .. } => "io",
            _ => "data",
        }
    }
}
