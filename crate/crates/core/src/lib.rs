//! Streaming selective state-space segmentation of raw FMCW radar samples.

pub mod bench;
mod bytes;
pub mod dataset;
pub mod error;
pub mod model;
pub mod sim;
pub mod stream;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
