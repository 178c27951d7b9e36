//! Score-based discriminator correction for conditional diffusion models
//! trained on noisy labels, at 2D desk scale.
//!
//! The crate covers the full loop: synthetic datasets with injected label
//! noise ([`data`]), a conditional score model and Heun sampler
//! ([`diffusion`]), noise detection ([`detection`]), a time-dependent
//! discriminator trained on pseudo-clean versus pseudo-corrupt data
//! ([`discriminator`]), gated guidance ([`guidance`]) and diagnostics
//! ([`metrics`]). [`pipeline`] wires the stages together behind a run
//! config.

pub mod analytic;
pub mod data;
pub mod detection;
pub mod diffusion;
pub mod discriminator;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod rng;

pub use error::{Error, Result};
