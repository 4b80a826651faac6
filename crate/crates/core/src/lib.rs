//! Flood forecasting for branched coastal rivers with graph transformer
//! networks.
//!
//! The crate is organized bottom-up:
//!
//! - [`graph`]: river topology and the normalized adjacency operator.
//! - [`data`]: hourly frames, sliding windows, chronological split, scaling.
//! - [`synth`]: seeded mass-balance simulator producing causal test data.
//! - [`nn`]: tensors, reverse-mode tape, layers, gradient checks, checkpoints.
//! - [`models`]: GTN-Parallel, GTN-Series, baselines and persistence.
//! - [`train`]: training, metrics, the covariate ablation and timing.
//! - [`experiment`]: experiment configuration shared with the command line.

pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod models;
pub mod nn;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use nn::Tensor;
