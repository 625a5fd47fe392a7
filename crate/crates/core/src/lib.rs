//! Adversarial-anchor concept unlearning on a miniature text-conditioned diffusion model.

pub mod advanchor;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod prompts;
pub mod rundir;
pub mod sampler;
pub mod schedule;
pub mod train;
pub mod unlearner;
pub mod weights;

pub use error::{LabError, Result};
