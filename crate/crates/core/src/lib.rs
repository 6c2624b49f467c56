//! Inference-time diversity guidance for masked discrete diffusion models.
//!
//! The sampler ([`engine`]) exposes a per-step hook over the raw logits.
//! [`odd`] implements orthogonal diverse diffusion, a sequential
//! Gram-Schmidt repulsion that keeps every sample's output independent of
//! later samples, and [`dpp`] a joint determinantal baseline. Toy denoisers
//! live in [`models`] and the evaluation harness in [`eval`].

pub mod cli;
pub mod config;
pub mod dpp;
pub mod engine;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod guidance;
pub mod models;
pub mod eval;
pub mod odd;
pub mod tensor;

pub use error::{Error, Result};
