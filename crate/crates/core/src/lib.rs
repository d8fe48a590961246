//! Learnability-guided incremental dataset distillation at desk scale.
//!
//! A class-conditional DDPM over low-dimensional data is steered, one
//! increment at a time, toward samples that the current learner finds hard
//! but a reference classifier still recognises. The [`analysis`] module holds
//! the redundancy and training-dynamics diagnostics used to compare
//! distilled datasets.

pub mod analysis;
pub mod data;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod learnability;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor2;
