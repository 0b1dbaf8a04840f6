//! Reward-guided synthetic data generation for identity classification.
//!
//! The crate covers the whole loop on a synthetic "identity world":
//! a class-conditional diffusion sampler is pretrained on a generic world,
//! cold-started on scarce target data, fine-tuned with a multi-objective
//! reward through policy gradients, and its samples are filtered by a
//! lookahead selector while training a downstream identity classifier.

pub mod error;
pub mod diffusion;
pub mod downstream;
pub mod numerics;
pub mod pipeline;
pub mod rewards;
pub mod rl;
pub mod selector;
pub mod world;

pub use error::{Error, Result};
