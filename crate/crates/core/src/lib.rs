//! Content-aware joint input pruning for camera + LiDAR BEV fusion.
//!
//! A per-cell importance mask over a bird's-eye-view voxel grid is predicted
//! from the front camera, projected back through the sensor calibration, and
//! used to delete LiDAR points and camera patches before any feature
//! extraction happens.

pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod geometry;
pub mod losses;
pub mod predictor;
pub mod projection;
pub mod pruning;
pub mod rng;
pub mod taskproxy;
pub mod viz;
pub mod voxelgrid;

pub use error::{Error, Result};
