//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (view-space z = {z:.6})")]
    BehindCamera { z: f64 },

    #[error("depth must be positive, got {0}")]
    InvalidDepth(f64),

    #[error("quaternion norm {0:.3e} is too small to define a rotation")]
    DegenerateRotation(f64),

    #[error("scale components must be positive, got ({0}, {1}, {2})")]
    InvalidScale(f64, f64, f64),

    #[error("image {width}x{height} is smaller than one {patch_size}x{patch_size} patch")]
    ImageTooSmall {
        width: u32,
        height: u32,
        patch_size: u32,
    },

    #[error("no valid masked patches; nothing to cast rays through")]
    EmptyBatch,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { term: &'static str, step: u64 },

    #[error("non-finite gradient in parameter group '{0}'")]
    NonFiniteGradient(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint config does not match the requested config: {0}")]
    ConfigMismatch(String),

    #[error("malformed {format} file: {detail}")]
    Parse { format: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
