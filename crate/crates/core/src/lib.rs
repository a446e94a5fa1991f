//! Multi-stage ("general-to-specific") pre-training and evaluation toolkit
//! for one-shot object instance recognition.

pub mod augment;
pub mod baselines;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod network;
pub mod pipeline;
pub mod raster;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
