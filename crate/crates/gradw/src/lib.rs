//! Feature-domain speech enhancement trained with gradient-derived
//! per-bin weights, plus the surrounding desk-scale toolkit: deterministic
//! synthetic corpora, a frozen convolutional speaker classifier used both
//! as gradient source and downstream scorer, a masking U-Net, SNR-exact
//! noise mixing, and speaker-verification metrics.
//!
//! See the `examples/` directory for one runnable walkthrough per
//! capability, and the `gradw` binary for the pipeline subcommands.

pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod dsp;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod report;
pub mod runner;
pub mod seeds;
pub mod speaker;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};
