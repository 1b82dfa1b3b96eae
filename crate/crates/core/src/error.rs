use std::path::PathBuf;

use crate::annotation::AnnotationError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Ingest { path: PathBuf, message: String },

    #[error("embedding for pair `{0}` is the zero vector and cannot be normalized")]
    DegenerateEmbedding(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no quality score for cluster member `{0}`")]
    MissingScore(String),

    #[error("triplets without annotation: {}", .0.join(", "))]
    MissingAnnotations(Vec<String>),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Annotation(#[from] AnnotationError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
