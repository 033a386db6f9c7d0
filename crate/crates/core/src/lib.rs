//! Error detection for image classifiers by measuring how much the softmax
//! output moves under natural image transformations.

pub mod attacks;
pub mod autodiff;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod data;
pub mod detectors;
pub mod error;
pub mod evaluation;
pub mod mlp_detector;
pub mod transforms;

pub use error::{Error, Result};
