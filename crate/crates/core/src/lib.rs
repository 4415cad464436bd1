//! Layout-guided spatial-temporal attention for region-controlled video
//! editing, on a toy latent diffusion stack.

pub mod blend;
pub mod clustering;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod layout;
pub mod metrics;
pub mod modulation;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Denoiser = diffusion::ToyDenoiser<f32>;
pub type Denoiser64 = diffusion::ToyDenoiser<f64>;
pub type Schedule32 = diffusion::SchedulerParams<f32>;
pub type Video = ndarray::Array4<f32>;
