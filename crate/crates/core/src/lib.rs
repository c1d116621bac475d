//! Foreground object transformation for fine-grained few-shot learning.

pub mod config;
pub mod datamodel;
pub mod eval;
pub mod error;
pub mod extractor;
pub mod miner;
pub mod networks;
pub mod pipeline;
pub mod raster;
pub mod saliency;
pub mod synth;
pub mod training;

pub use error::{FotError, Result};
