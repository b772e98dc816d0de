use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("group order mismatch: {0} vs {1}")]
    GroupOrderMismatch(u32, u32),

    #[error("group order must be >= 1")]
    ZeroGroupOrder,

    #[error("invalid rotation matrix (orthonormality error {0:.3e})")]
    InvalidRotation(f64),

    #[error("inexact transform: {0}")]
    InexactTransform(String),

    #[error("invalid gripper state: {0}")]
    InvalidState(String),

    #[error("invalid demonstration: {0}")]
    InvalidDemo(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("field type mismatch: {0}")]
    TypeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("target {coord:?} lies outside the voxel grid")]
    TargetOutOfBounds { coord: [f64; 3] },

    #[error("observation point cloud is empty")]
    EmptyCloud,

    #[error("non-finite value in diffusion chain at step {step} (max |x| = {magnitude:e})")]
    NonFinite { step: usize, magnitude: f64 },

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("scene unsolvable: {0}")]
    Unsolvable(String),

    #[error("bad file magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("file truncated")]
    Truncated,

    #[error("feature width inconsistent: header says {header}, record has {record}")]
    FeatureWidth { header: usize, record: usize },

    #[error("checksum mismatch")]
    Checksum,

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
