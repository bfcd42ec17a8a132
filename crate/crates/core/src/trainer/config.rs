use serde::{Deserialize, Serialize};

use crate::distill::{DivergenceKind, ScopeKind};
use crate::env::CorpusSpec;
use crate::error::{Error, Result};
use crate::hindsight::{HindsightConfig, HindsightFlags};
use crate::optim::OptimizerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalDecoding {
    #[default]
    Greedy,
    Sample,
}

/// Synthetic corpus parameters and the size of the held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub hop_mix: [f64; 3],
    pub density: f64,
}

impl CorpusConfig {
    pub fn spec(&self) -> CorpusSpec {
        CorpusSpec {
            seed: self.seed,
            n_entities: self.n_entities,
            n_relations: self.n_relations,
            n_questions: self.n_train + self.n_eval,
            hop_mix: self.hop_mix,
            density: self.density,
        }
    }
}

/// Scripted-demonstration pretraining that gives the policy its starting
/// behaviour. The mix probabilities describe the demonstrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub steps: usize,
    pub batch_questions: usize,
    pub learning_rate: f64,
    /// Probability of answering after each search instead of following the
    /// next hop.
    pub p_early_answer: f64,
    /// Per-token probability of a wrong query token.
    pub p_query_noise: f64,
    /// Probability of a wrong pick when the answer is copied from documents.
    pub p_answer_noise: f64,
    /// Probability of opening with a short think span.
    pub p_think: f64,
    /// Weight of the teacher-view term.
    pub teacher_weight: f64,
    pub init_scale: f64,
}

/// Everything a training run depends on besides the corpus itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Rollouts per question (G).
    pub group_size: usize,
    /// Questions per step; each contributes one group.
    pub batch_questions: usize,
    pub learning_rate: f64,
    pub total_steps: usize,
    pub beta: f64,
    pub epsilon: f64,
    pub max_searches: usize,
    pub max_body_tokens: usize,
    pub temperature: f64,
    pub retrieval_k: usize,
    pub alpha_sd: f64,
    pub t_warm: usize,
    pub trunc_k: usize,
    pub rho: f64,
    pub hindsight_budget: usize,
    pub divergence: DivergenceKind,
    pub scope: ScopeKind,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub eval_every: usize,
    pub eval_decoding: EvalDecoding,
    /// Checkpoint cadence in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub hindsight: HindsightFlags,
    pub corpus: CorpusConfig,
    pub bootstrap: BootstrapConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Toy,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "toy" => Ok(Preset::Toy),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected paper or toy)"
            ))),
        }
    }
}

impl TrainConfig {
    /// Published hyperparameters. The batch is read as 256 questions per
    /// step; the learning rate targets a multi-billion-parameter model.
    pub fn paper() -> Self {
        Self {
            group_size: 5,
            batch_questions: 256,
            learning_rate: 1e-6,
            total_steps: 200,
            beta: 0.001,
            epsilon: 0.2,
            max_searches: 3,
            max_body_tokens: 32,
            temperature: 1.0,
            retrieval_k: 3,
            alpha_sd: 1e-3,
            t_warm: 50,
            trunc_k: 50,
            rho: 0.0,
            hindsight_budget: 1024,
            divergence: DivergenceKind::Jsd,
            scope: ScopeKind::QueryPositions,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            eval_every: 10,
            eval_decoding: EvalDecoding::Greedy,
            checkpoint_every: 50,
            hindsight: HindsightFlags::default(),
            corpus: CorpusConfig {
                seed: 7,
                n_entities: 200,
                n_relations: 8,
                n_train: 400,
                n_eval: 100,
                hop_mix: [0.0, 1.0, 0.0],
                density: 0.6,
            },
            bootstrap: BootstrapConfig {
                steps: 300,
                batch_questions: 16,
                learning_rate: 0.05,
                p_early_answer: 0.6,
                p_query_noise: 0.25,
                p_answer_noise: 0.1,
                p_think: 0.3,
                teacher_weight: 1.0,
                init_scale: 0.01,
            },
        }
    }

    /// Desk-scale settings: small batches, a learning rate that moves the
    /// pointer policy, and a distillation weight on the scale of the GRPO
    /// gradient.
    pub fn toy() -> Self {
        Self {
            batch_questions: 8,
            learning_rate: 3e-3,
            total_steps: 200,
            alpha_sd: 0.5,
            t_warm: 50,
            ..Self::paper()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Toy => Self::toy(),
        }
    }

    pub fn hindsight_config(&self) -> HindsightConfig {
        HindsightConfig {
            rho: self.rho,
            budget: self.hindsight_budget,
            flags: self.hindsight,
        }
    }

    /// Distillation weight in effect at `step`.
    pub fn alpha_at(&self, step: usize) -> f64 {
        if step < self.t_warm {
            0.0
        } else {
            self.alpha_sd
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        let positive = [
            (self.batch_questions, "batch_questions"),
            (self.total_steps, "total_steps"),
            (self.max_body_tokens, "max_body_tokens"),
            (self.retrieval_k, "retrieval_k"),
            (self.trunc_k, "trunc_k"),
            (self.hindsight_budget, "hindsight_budget"),
            (self.eval_every, "eval_every"),
        ];
        for (v, name) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let finite_pos = [
            (self.learning_rate, "learning_rate"),
            (self.temperature, "temperature"),
            (self.epsilon, "epsilon"),
        ];
        for (v, name) in finite_pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive and finite")));
            }
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) || !(self.alpha_sd.is_finite() && self.alpha_sd >= 0.0) {
            return bad("beta and alpha_sd must be non-negative and finite");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        if self.t_warm > self.total_steps {
            return bad("t_warm must not exceed total_steps");
        }
        self.hindsight.validate().map_err(|e| Error::Config(e.to_string()))?;
        let c = &self.corpus;
        if c.n_train < self.batch_questions {
            return bad("corpus.n_train must be at least batch_questions");
        }
        if c.n_eval == 0 {
            return bad("corpus.n_eval must be positive");
        }
        let b = &self.bootstrap;
        for (p, name) in [
            (b.p_early_answer, "p_early_answer"),
            (b.p_query_noise, "p_query_noise"),
            (b.p_answer_noise, "p_answer_noise"),
            (b.p_think, "p_think"),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("bootstrap.{name} must lie in [0, 1]")));
            }
        }
        if b.steps > 0 && (b.batch_questions == 0 || b.learning_rate.is_nan() || b.learning_rate <= 0.0) {
            return bad("bootstrap needs positive batch_questions and learning_rate");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a complete config.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the keys present in `text` on top of `self`.
    pub fn overlay_toml(&self, text: &str) -> Result<Self> {
        let patch: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base: toml::Table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, patch);
        base.try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }
}

fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [TrainConfig::paper(), TrainConfig::toy()] {
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        }
        let p = TrainConfig::paper();
        assert_eq!((p.group_size, p.total_steps, p.t_warm, p.trunc_k), (5, 200, 50, 50));
        assert_eq!((p.beta, p.epsilon, p.alpha_sd, p.rho), (0.001, 0.2, 1e-3, 0.0));
        assert_eq!(TrainConfig::toy().learning_rate, 3e-3);
    }

    #[test]
    fn overlay_changes_only_listed_keys() {
        let base = TrainConfig::toy();
        let cfg = base
            .overlay_toml(
                "seed = 11\ndivergence = \"forward_kl\"\n[hindsight]\nleave_one_out = true\n[corpus]\nn_eval = 20\n",
            )
            .unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.divergence, DivergenceKind::ForwardKl);
        assert!(cfg.hindsight.leave_one_out);
        assert_eq!(cfg.corpus.n_eval, 20);
        assert_eq!(cfg.corpus.n_train, base.corpus.n_train);
        assert_eq!(cfg.learning_rate, base.learning_rate);
        assert!(base.overlay_toml("no_such_key = 1").is_err());
        assert!(base.overlay_toml("[hindsight]\nbogus = true").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = TrainConfig::toy();
        c.rho = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::toy();
        c.t_warm = c.total_steps + 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::toy();
        c.hindsight.docs_only = true;
        c.hindsight.no_labels = true;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = TrainConfig::toy();
        assert_eq!(c.alpha_at(c.t_warm - 1), 0.0);
        assert_eq!(c.alpha_at(c.t_warm), c.alpha_sd);
    }
}
