//! Latent-space flow-based prior model: a normalizing-flow prior over the
//! latent space of a top-down Gaussian decoder, trained by maximum
//! likelihood with short-run Langevin posterior inference, plus the
//! variational baseline and the downstream synthesis / reconstruction /
//! inpainting / anomaly-detection / recovery tasks at desk scale.

pub mod error;
pub mod tensor;
pub mod optim;
pub mod nn;
pub mod flow;
pub mod model;
pub mod inference;
pub mod eval;
pub mod data;
pub mod checkpoint;
pub mod config;
pub mod training;

pub use error::{Error, Result};
