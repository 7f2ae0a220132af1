use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CsawError>;

#[derive(Debug, Error)]
pub enum CsawError {
    #[error("no classes found under {0}")]
    NoClasses(PathBuf),

    #[error("class `{0}` has no image files")]
    EmptyClass(String),

    #[error("failed to read image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown class index {index} (dataset has {classes} classes)")]
    UnknownClass { index: usize, classes: usize },

    #[error("prompt for class `{class}` needs {len} tokens, backbone limit is {limit}")]
    SequenceTooLong { class: String, len: usize, limit: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero-variance embedding dimension {0}")]
    ZeroVariance(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset `{0}` is required but no manifest was supplied")]
    MissingDataset(String),

    #[error("class lists do not share the required classes: {0}")]
    ClassMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CsawError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CsawError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad configuration or inputs rather than a
    /// runtime failure. The CLI maps these to exit code 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CsawError::InvalidArgument(_)
                | CsawError::Config(_)
                | CsawError::MissingDataset(_)
                | CsawError::ClassMismatch(_)
                | CsawError::UnknownClass { .. }
        )
    }
}
