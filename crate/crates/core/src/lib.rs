//! Reliability-gated distribution matching for streaming autoregressive
//! generators, on synthetic latent worlds with closed-form teachers.

pub mod diagnostics;
pub mod diffusion;
mod error;
pub mod rng;
pub mod smallgrad;
pub mod stats;
pub mod student;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
