//! Painterly harmonization with a guided toy latent diffusion model.
//!
//! A frozen codec and denoiser are steered by a trainable adaptive encoder
//! whose features are fused with the denoiser's own through masked
//! cross-attention. Everything numeric is generic over [`Scalar`] (`f32` or
//! `f64`); the aliases below fix the common choices.

pub mod adapters;
pub mod checkpoint;
pub mod codec;
pub mod datagen;
pub mod def_fusion;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{HarmonizeOptions, ModelConfig, ModelState, Profile};
pub use phdiff_autograd::{Scalar, Tensor};

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type ModelStateF32 = ModelState<f32>;
pub type ModelStateF64 = ModelState<f64>;
pub type CompositeSampleF32 = datagen::CompositeSample<f32>;
pub type CompositeSampleF64 = datagen::CompositeSample<f64>;
pub type DiffusionScheduleF32 = diffusion::DiffusionSchedule<f32>;
pub type DiffusionScheduleF64 = diffusion::DiffusionSchedule<f64>;
