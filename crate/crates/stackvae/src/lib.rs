//! Multivariate time-series anomaly detection with a channel-weight-sharing
//! block-wise VAE fused with a learned sparse channel-interrelation graph.
//!
//! The crate covers the full pipeline: dataset ingestion and synthesis,
//! joint training of the VAE and graph module, reconstruction-based scoring,
//! point-adjust evaluation, and a lasso structure-learning baseline.

pub mod adam;
pub mod error;
pub mod data;
pub mod gradcheck;
pub mod graph;
pub mod linear;
pub mod matrix;
pub mod model;
pub mod synthetic;
pub mod trainer;
pub mod tape;

pub use error::{Error, Result};
pub use matrix::Matrix;
