//! Multi-scale spatial-temporal hypergraph forecasting for multivariate time
//! series, with a small reverse-mode autodiff engine underneath.

pub mod ahm;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dtw;
pub mod error;
pub mod export;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod spg;
pub mod stpm;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::StHyper;
