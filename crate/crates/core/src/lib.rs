//! Hierarchical equivariant policy: a voxel-heatmap keypose predictor and a
//! diffusion trajectory generator operating in the keypose frame.

pub mod audit;
pub mod binio;
pub mod config;
pub mod dataset;
pub mod equinet;
pub mod env;
pub mod error;
pub mod group;
pub mod high_level;
pub mod lattice;
pub mod low_level;
pub mod math;
pub mod model;
pub mod scene;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
