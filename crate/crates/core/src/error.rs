use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pooling exponent: {0}")]
    InvalidExponent(String),

    #[error("invalid pooling epsilon {0}: must be in (0, 1e-6)")]
    InvalidEpsilon(f64),

    #[error("non-finite activation {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("empty activation map")]
    EmptyMap,

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("weights for layer `{layer}`: {reason}")]
    WeightMismatch { layer: String, reason: String },

    #[error("checkpoint config mismatch: {0}")]
    CheckpointConfigMismatch(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("image `{0}` is listed in the index but missing on disk")]
    MissingImage(PathBuf),

    #[error("image `{0}` has no crack label (strict label policy)")]
    Unlabeled(PathBuf),

    #[error("image `{path}`: {reason}")]
    BadImage { path: PathBuf, reason: String },

    #[error("cannot stratify: {0}")]
    Stratify(String),

    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("invalid sweep config: {0}")]
    InvalidSweep(String),

    #[error("mask upsampling target {target:?} is smaller than source {from:?}")]
    UpsampleTarget { from: [usize; 2], target: [usize; 2] },

    #[error("polarity must be chosen explicitly for p = {0} (use --polarity direct|inverted)")]
    PolarityRequired(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
