//! Model-aware parametric batch-wise mixup for single-domain generalization.
//!
//! A prediction model (feature extractor + classifier) is pretrained on one
//! source domain, then repeatedly fine-tuned on a growing store of synthetic
//! feature-space instances. Each synthetic instance is produced by a
//! feature-wise attention generator that mixes a small batch of training
//! features around an adversarial query found with Langevin dynamics, while a
//! discriminator keeps the mixed features close to real ones.

pub mod cli;
pub mod correlation;
pub mod data;
pub mod error;
pub mod mixgen;
pub mod models;
pub mod numerics;
pub mod query;
pub mod trainer;

pub use error::{MpbmError, Result};
pub use numerics::{Rng, Tape, Tensor, Var};
