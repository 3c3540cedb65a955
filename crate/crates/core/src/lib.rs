//! Synthetic-phantom toolkit for translating 3T-like diffusion MRI into
//! 7T-like diffusion MRI through RISH features, a vector-quantized latent
//! space and a guided latent diffusion model.

pub mod error;
pub mod ldm;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod sh;
pub mod superres;
pub mod volume;
pub mod vqvae;

pub use error::{Error, Result};
