use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("axis too short to trim: length {len}, margin {margin}")]
    AxisTooShort { len: usize, margin: usize },

    #[error("empty sequence")]
    Empty,

    #[error("expected {expected} channels, got {got}")]
    Channels { expected: usize, got: usize },

    #[error("input {height}x{width} smaller than the minimum {min}x{min}")]
    TooSmall { height: usize, width: usize, min: usize },

    #[error("could not place {requested} non-overlapping objects (seed {seed})")]
    Placement { seed: u64, requested: usize },

    #[error("more ground truths ({gts}) than predictions ({preds})")]
    TooManyTargets { gts: usize, preds: usize },

    #[error("non-finite loss at epoch {epoch}, step {step} (batch seed {batch_seed})")]
    NonFiniteLoss { epoch: usize, step: usize, batch_seed: u64 },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint {path}: {reason} (expected format version {expected})")]
    Checkpoint { path: PathBuf, reason: String, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
