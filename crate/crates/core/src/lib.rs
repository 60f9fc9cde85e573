//! Masked-autoencoder toolkit for structural health monitoring on
//! single-axis accelerometer data: windowing and spectrograms, a
//! scalable ViT autoencoder, training loops, anomaly thresholds,
//! classical baselines, a synthetic bridge generator and evaluation.

pub mod anomaly;
pub mod baselines;
pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod signal;
pub mod synth;
pub mod tensorio;
pub mod train;

pub use error::{Error, Result};
