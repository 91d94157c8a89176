//! Crate-wide error type.

use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum DereflectError {
    /// Two tensors that must agree in shape do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An argument violated a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Fewer than the minimum number of keypoint matches survived filtering.
    #[error("insufficient features: {found} matches, need at least {needed}")]
    InsufficientFeatures { found: usize, needed: usize },

    /// RANSAC could not find a model with enough inliers.
    #[error("alignment failure: {0}")]
    AlignmentFailure(String),

    /// A frozen parameter partition was mutated during training.
    #[error("freeze contract violated: partition `{0}` changed")]
    FreezeViolation(String),

    /// A training stage was requested out of order.
    #[error("stage ordering: {0}")]
    StageOrdering(String),

    /// Checkpoint file is malformed or has an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DereflectError>;
