//! Desk-scale toolkit for adversarially robust image classification with
//! diffusion-representation alignment (DRA).
//!
//! The crate trains a small class-conditional denoising diffusion model,
//! uses it both as a synthetic-data generator and as a frozen feature prior
//! for TRADES adversarial training, and ships the measurement battery used
//! to study the learned representations: uniformity/alignment, CKNNA,
//! frequency saliency, classification dimension, and TopK sparse
//! autoencoders.
//!
//! Modules map one-to-one onto the pipeline stages:
//! - [`data`]: datasets, synthetic pools, mixed batch sampling
//! - [`diffusion`]: denoiser training, sampling, representation extraction
//! - [`attacks`]: l-inf PGD, EOT gradients, robust evaluation
//! - [`robust`]: TRADES + DRA training loop, EMA, projection head
//! - [`analysis`]: representation metrics and probes
//! - [`fixtures`]: published reference numbers kept as read-only fixtures

pub mod analysis;
pub mod archive;
pub mod attacks;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod fixtures;
pub mod nn;
pub mod repr;
pub mod rng;
pub mod robust;

pub use error::{Error, Result};
pub use nn::Images;
