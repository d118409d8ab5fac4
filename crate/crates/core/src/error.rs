use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SnfkError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("camera {0} is invalid: {1}")]
    Camera(String, String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error in {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("non-finite loss at t={t}, phase {phase}, iteration {iter}")]
    NonFiniteLoss { t: usize, phase: String, iter: usize },

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, SnfkError>;

impl SnfkError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SnfkError::Io { path: path.into(), source }
    }

    /// Exit code for the CLI: config/usage errors map to 2, everything else to 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            SnfkError::Config(_)
            | SnfkError::Camera(..)
            | SnfkError::Dataset(_)
            | SnfkError::Json { .. } => 2,
            SnfkError::Io { .. } => 2,
            _ => 1,
        }
    }
}
