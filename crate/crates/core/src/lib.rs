//! Hindsight self-distillation for search-augmented policies, trained with
//! group-relative policy optimization on a synthetic multi-hop QA world.

pub mod distill;
pub mod env;
pub mod error;
pub mod format;
pub mod grpo;
pub mod hindsight;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod scoring;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
