//! Diffusion-model pixel representations for few-shot semantic segmentation.
//!
//! The pipeline: train a small denoising diffusion model on unlabeled
//! images, then turn any image into per-pixel feature vectors by noising
//! it, tapping UNet decoder activations at chosen timesteps, upsampling
//! the taps to image resolution and concatenating them. An ensemble of
//! small MLPs maps each pixel's feature vector to a class label by
//! majority vote. Everything runs on a procedurally generated shapes
//! dataset with exact ground-truth masks.
//!
//! Numeric kernels are generic over [`num::Real`] (f32 or f64); the
//! pipeline runs at f32 while oracles and gradient checks can instantiate
//! the identical code at f64.

pub mod analysis;
pub mod binio;
pub mod classifier;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod num;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod unet;
pub mod viz;

pub use error::{Error, Result};
pub use num::{Pixel, Real};

/// Concrete f32 aliases for the pipeline types.
pub type ImageTensor = tensor::Tensor<f32>;
pub type Schedule = diffusion::NoiseSchedule<f32>;
pub type UNet = unet::UNetModel<f32>;
pub type Ensemble = classifier::EnsembleModel<f32>;
