//! Shared-trunk multitask perception: detection and segmentation heads on one
//! residual trunk, synthetic data, training, evaluation and deployment costing.

pub mod bench;
pub mod config;
pub mod data;
pub mod det;
mod error;
pub mod eval;
pub mod imageio;
pub mod model;
pub mod params;
pub mod rng;
pub mod seg;
pub mod train;
pub mod trunk;

pub use error::{CoreError, Result};
