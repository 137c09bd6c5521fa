//! GANomaly adversarial anomaly detection.
//!
//! Networks and training are implemented on a small hand-written
//! convolution stack ([`nn`]); the rest of the crate covers data
//! ingestion, anomaly scoring, score scaling and evaluation.

pub mod config;
pub mod datasets;
pub mod error;
pub mod evalmetrics;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod scoring;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
