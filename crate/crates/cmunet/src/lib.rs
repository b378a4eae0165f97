//! Encoder/decoder segmentation network with a ConvMixer bottleneck and
//! multi-scale attention-gated skip connections, built on a small
//! reverse-mode autodiff tensor engine. No external ML dependencies.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
