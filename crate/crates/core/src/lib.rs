//! GNSS factor-graph positioning with learned, credibility-supervised
//! per-satellite weighting.
//!
//! The pipeline: a weighting network maps per-satellite features to
//! information weights, a differentiable windowed Gauss-Newton solver turns
//! those weights into an East-North position and posterior covariance, and
//! proper scoring rules (negative log-likelihood, energy score) supervise
//! that predictive distribution end to end. Classical weighting baselines,
//! a synthetic urban-canyon scenario generator, and calibration diagnostics
//! round out the toolkit.

pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod eval;
pub mod geo;
pub mod losses;
pub mod obs;
pub mod sim;
pub mod solver;
pub mod trainer;
pub mod weight_net;
pub mod weighting;

pub use error::{Error, Result};
