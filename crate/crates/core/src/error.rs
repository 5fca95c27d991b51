use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({cx}, {cy}, {w}, {h}): width and height must be positive and finite")]
    InvalidBox { cx: f64, cy: f64, w: f64, h: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("stage {stage}: only {positives} positives at IoU threshold {threshold}")]
    ScarcePositives {
        stage: usize,
        threshold: f64,
        positives: usize,
    },

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("classifier diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("could not generate scene {image_id}: {reason}")]
    Generation { image_id: u64, reason: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unsupported model format version {found:?} (expected {expected})")]
    Version { found: Option<u64>, expected: u64 },

    #[error("oracle instance too large: {0} detections in one image (limit 12)")]
    OracleTooLarge(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
