use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("field of view {0} deg is outside (0, 180)")]
    OutOfRangeFov(f64),

    #[error("degenerate geometry: relative head vector has norm {0:e}")]
    DegenerateGeometry(f64),

    #[error("vector is not unit length (norm {0})")]
    NotUnit(f64),

    #[error("vector norm {0:e} is below the normalization guard")]
    NearZeroNorm(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("positive sample is missing its pseudo gaze label")]
    MissingPseudoLabel,

    #[error("positive sample {0} has degenerate geometry")]
    DegeneratePositive(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no positive labels; average precision is undefined")]
    NoPositives,

    #[error("frustum sampling failed after {0} attempts")]
    RetryExhausted(usize),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("missing image {0}")]
    MissingImage(PathBuf),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
