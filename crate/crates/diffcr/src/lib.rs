//! Diffusion-based latent image compression.
//!
//! The pipeline compresses an image by encoding it to a latent, coding that
//! latent with a learned entropy model, and decoding by running a small
//! conditional denoiser whose output is refined by a frequency-aware
//! consistency head. Decoding takes exactly two denoiser evaluations, which
//! is where the speed over a conventional diffusion decoder comes from.
//!
//! Crate layout:
//! - [`tensor`]: reverse-mode autodiff over `ndarray` arrays (all networks
//!   here are built on it).
//! - [`diffusion`]: noise schedule and the forward/reverse process algebra.
//! - [`codec`]: analysis/synthesis transforms, quantization, the vector
//!   quantized hyperprior, and the spatial-channel context model.
//! - [`entropy`]: range coder, frozen CDF tables, and the bitstream container.
//! - [`denoiser`], [`fase`]: the conditional denoising UNet, its control
//!   branch, and the frequency-aware skip estimation head.
//! - [`sampler`]: two-step decoding plus a multi-step DDIM baseline.
//! - [`train`]: two-stage training loop.
//! - [`evalkit`]: PSNR, MS-SSIM, BD-rate, frequency profiles, timing.
//! - [`pipeline`]: the end-to-end model tying the pieces together.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod entropy;
pub mod error;
pub mod evalkit;
pub mod fase;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use error::{DiffcrError, Result};
pub use pipeline::Model;
