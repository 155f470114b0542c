//! Proposal weighting for two-stage detectors.

pub mod config;
pub mod error;
pub mod gate;
pub mod gradcheck;
pub mod heatmap;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
