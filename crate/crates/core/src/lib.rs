//! Conditional diffusion for multi-temporal cloud removal.
//!
//! The crate is organized around a small differentiable tensor layer
//! ([`numerics`]), noise-schedule algebra ([`schedule`]), a fusion-block
//! denoising model ([`model`]), a training loop with EMA shadowing
//! ([`training`]), few-step ancestral sampling ([`sampler`]), a synthetic
//! multi-temporal dataset generator with a bit-exact container format
//! ([`data`]), and reference PSNR/SSIM metrics ([`metrics`]).

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
