//! Synchronized two-modality video prediction in triplane latent space:
//! paired latent diffusion branches coupled by split spatio-temporal
//! cross-attention, with shared forward noise and conditioning masking.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod opt;
pub mod stca;
pub mod tensor;
pub mod toyworld;
pub mod train;
pub mod video;

pub use error::{Error, Result};
