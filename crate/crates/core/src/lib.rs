//! Rectified-flow latent synthesis of contrast-enhanced volumes from paired
//! pre-contrast inputs, at desk scale.

pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod schedulers;
pub mod synthdata;
pub mod train;
pub mod tensor;
pub mod vae;
pub mod velocity_net;
pub mod volume;

pub use error::{Error, Result};
