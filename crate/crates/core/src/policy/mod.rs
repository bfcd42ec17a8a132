//! Autoregressive policy over the closed vocabulary.

pub mod categorical;
pub mod features;
pub mod model;
pub mod rollout;

pub use categorical::{Categorical, Support};
pub use model::{
    decode_f64s, encode_f64s, logit_grad_from_logp, logit_grad_from_probs, Forward, Policy, PolicyParams, PolicyShape,
    PositionOutput, Probe,
};
pub use rollout::{sample_rollout, Decoding, Rollout, RolloutLimits};
