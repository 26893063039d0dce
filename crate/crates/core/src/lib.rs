//! Post-training quantization simulator with mean-activation-shift analysis
//! and two bias-only remedies: iterative bias correction and bias fine-tuning.

pub mod bft;
pub mod cli;
pub mod error;
pub mod fixtures;
pub mod ibc;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod qstats;
pub mod quant;
pub mod tensor;
pub mod theory;

pub use error::{Error, ErrorClass, Result};
pub use tensor::Tensor;
