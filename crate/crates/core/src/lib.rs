//! Toy-scale laboratory for accelerating diffusion sampling by distillation.
//!
//! A small x-predicting denoiser is trained on a labeled 2-D Gaussian
//! mixture, and its DDIM sampler is progressively halved with either
//! progressive distillation or classifier-based feature distillation.

pub mod cli;
pub mod diffnet;
pub mod distill;
pub mod error;
pub mod evalsuite;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
