//! Frequency-conditioned layout-to-image diffusion testbed.
//!
//! A self-contained, desk-scale generative stack: a synthetic degraded-scene
//! generator, an exemplar bank of per-class crops, frequency prototype
//! extraction with dual perceiver-style resamplers, masked visual-frequency
//! attention with instance coherence maps, adaptive spatial-frequency
//! aggregation, a small latent-diffusion backbone to inject everything into,
//! and an evaluation/ablation harness.
//!
//! All numeric code is generic over [`num::Real`] (`f32` or `f64`); training
//! runs in `f32`, oracle-grade verification in `f64`.

pub mod error;
pub mod num;
pub mod tensor;

pub mod asfa;
pub mod diffusion;
pub mod exemplar;
pub mod freq;
pub mod imgutil;
pub mod layout;
pub mod nn;
pub mod resampler;
pub mod scenegen;
pub mod vfea;

pub use error::{FicgenError, Result};
pub use num::Real;

/// Concrete aliases for the common instantiations.
pub type Spectrum32 = freq::Spectrum<f32>;
pub type Spectrum64 = freq::Spectrum<f64>;
pub type ModelState32 = diffusion::ModelState<f32>;
pub type ModelState64 = diffusion::ModelState<f64>;
