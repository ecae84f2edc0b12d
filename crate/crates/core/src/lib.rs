//! Desk-scale laboratory for one-step diffusion distillation applied to 4x
//! image super-resolution with a timestep control knob.
//!
//! The pipeline trains three small networks end to end on procedurally
//! generated images, with no external pretrained models:
//!
//! 1. a plain convolutional autoencoder (48x48 images, 4x12x12 latents),
//! 2. a latent-space diffusion UNet used as the frozen teacher,
//! 3. a one-step student (time-aware encoder + UNet-with-LoRA) distilled
//!    from the teacher with a timestep-mapped score-distillation loss,
//!    alternating with a LoRA critic trained on the student's outputs.
//!
//! Everything is deterministic under a seed: data synthesis uses a
//! counter-based RNG ([`rng`]), training streams derive draws from
//! `(seed, step, sample)`, and checkpoints round-trip bit-exactly.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod degrade;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod params;
pub mod rng;
pub mod schedule;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
