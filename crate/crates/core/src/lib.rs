//! Desk-scale continual-learning replay benchmark.
//!
//! Builds task streams (split handwritten digits via IDX files, or synthetic
//! Gaussian streams), trains a small MLP classifier sequentially over the
//! tasks with experience replay or VAE-based generative replay, selects
//! replay samples with one of eight strategies, and reports accuracy,
//! forgetting rate, and average time.
//!
//! Everything is seed-deterministic: identical configuration and stream
//! produce bit-identical results.

pub mod data;
pub mod engine;
pub mod error;
pub mod matrix;
pub mod memory;
pub mod nn;
mod sampling;
pub mod seeds;
pub mod strategies;
pub mod vae;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use nn::{Batch, EmbeddingMatrix, ForwardMode, Gradient, LossValue, ModelParams, PredictionMatrix};
