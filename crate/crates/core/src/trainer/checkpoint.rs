use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::policy::{decode_f64s, encode_f64s, PolicyParams, PolicyShape};

pub const CHECKPOINT_FORMAT: &str = "sdlab-checkpoint/1";

/// All randomness is drawn from substreams keyed by the seed and the step,
/// so these two numbers are the complete generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub shape: PolicyShape,
    /// Completed optimizer steps.
    pub step: usize,
    pub rng: RngState,
    pub theta: String,
    pub ref_theta: String,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub corpus_hash: String,
}

impl Checkpoint {
    pub fn params(&self) -> Result<PolicyParams> {
        PolicyParams::from_vec(self.shape, decode_f64s(&self.theta)?)
    }

    pub fn ref_params(&self) -> Result<PolicyParams> {
        PolicyParams::from_vec(self.shape, decode_f64s(&self.ref_theta)?)
    }

    pub fn encode_params(p: &PolicyParams) -> String {
        encode_f64s(&p.theta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format `{}`",
                c.format
            )));
        }
        if c.rng.next_step != c.step || c.rng.seed != c.config.seed {
            return Err(Error::Checkpoint("rng state disagrees with step or seed".into()));
        }
        Ok(c)
    }
}
