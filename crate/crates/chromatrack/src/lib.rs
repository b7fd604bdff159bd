//! Self-supervised video colorization by pointing into reference frames.
//!
//! A small embedding network is trained to colorize gray-scale clips by
//! copying quantized colors from reference frames through a row-stochastic
//! softmax similarity matrix. The same pointer, unchanged, then propagates
//! segment masks and keypoints at inference time. The crate also carries
//! the synthetic clip generator, evaluation metrics, file formats, and the
//! CLI that ties the pipeline together.

pub mod chroma;
pub mod cli;
pub mod embednet;
pub mod error;
pub mod io;
pub mod metrics;
pub mod numcore;
pub mod pointer;
pub mod synth;
pub mod tracker;
pub mod trainer;

pub use error::{Error, Result};
