//! Diffusion mask priors for refining semantic segmentation.
//!
//! A frozen base segmentor supplies 1/4-scale features; a conditional
//! denoiser trained on a categorical diffusion process iteratively refines
//! the mask, and the result is upsampled back to full resolution.

pub mod checkpoint;
pub mod dataset;
pub mod denoiser;
pub mod discrete;
pub mod error;
pub mod gaussian;
pub mod grids;
pub mod metrics;
pub mod nn;
pub mod refiner;
pub mod seed;
pub mod segmentor;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
