//! Joint-score diffusion for MRI-to-PET synthesis.
//!
//! A U-Net estimates the score of the joint density of a noisy PET slice and
//! its clean MRI under a variance-exploding SDE. Training uses denoising score
//! matching; synthesis runs a predictor-corrector sampler with the MRI held
//! fixed, so the joint score acts as the conditional score of PET given MRI.

pub mod checks;
pub mod data;
mod error;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod score_model;
pub mod sde;
pub mod training;

pub use error::{Error, Result};
pub use sde::NoiseSchedule;

pub use candle_core::{DType, Device, Tensor};
