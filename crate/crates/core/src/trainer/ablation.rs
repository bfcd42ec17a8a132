//! Seeded runs over hindsight-construction and objective variants.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::{bootstrap_params, Trainer};
use crate::distill::{DivergenceKind, ScopeKind};
use crate::env::Corpus;
use crate::error::{Error, Result};
use crate::hindsight::HindsightFlags;
use crate::policy::{Policy, PolicyParams, PolicyShape};

pub const HINDSIGHT_VARIANTS: [&str; 8] = [
    "full",
    "no_labels",
    "shuffled_labels",
    "correct_only",
    "single_rollout",
    "leave_one_out",
    "no_masking",
    "docs_only",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationFamily {
    Hindsight,
    Objective,
    Scope,
}

impl std::str::FromStr for AblationFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "hindsight" => Ok(Self::Hindsight),
            "objective" => Ok(Self::Objective),
            "scope" => Ok(Self::Scope),
            other => Err(Error::Config(format!(
                "unknown ablation family `{other}` (expected hindsight, objective or scope)"
            ))),
        }
    }
}

impl AblationFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::Hindsight => "hindsight",
            Self::Objective => "objective",
            Self::Scope => "scope",
        }
    }
}

/// A named configuration change applied on top of the base config.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    /// Table the row belongs to: `hindsight` or `objective`.
    pub table: &'static str,
    pub name: String,
    pub flags: HindsightFlags,
    pub divergence: DivergenceKind,
    pub scope: ScopeKind,
}

impl Variant {
    fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            hindsight: self.flags,
            divergence: self.divergence,
            scope: self.scope,
            ..base.clone()
        }
    }
}

/// Rows for the requested families. The objective table holds one row per
/// divergence (the JSD row is the full configuration) plus the action-scope
/// row; the scope family asks for that same table.
pub fn variants(families: &[AblationFamily]) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    let want = |f| families.contains(&f);
    if want(AblationFamily::Hindsight) {
        for name in HINDSIGHT_VARIANTS {
            out.push(Variant {
                table: "hindsight",
                name: name.to_string(),
                flags: HindsightFlags::from_variant(name)?,
                divergence: DivergenceKind::Jsd,
                scope: ScopeKind::QueryPositions,
            });
        }
    }
    if want(AblationFamily::Objective) || want(AblationFamily::Scope) {
        for d in DivergenceKind::ALL {
            out.push(Variant {
                table: "objective",
                name: d.name().to_string(),
                flags: HindsightFlags::default(),
                divergence: d,
                scope: ScopeKind::QueryPositions,
            });
        }
        out.push(Variant {
            table: "objective",
            name: "action_scope".to_string(),
            flags: HindsightFlags::default(),
            divergence: DivergenceKind::Jsd,
            scope: ScopeKind::ActionPositions,
        });
    }
    Ok(out)
}

/// Outcome of one seeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub table: String,
    pub variant: String,
    pub seed: u64,
    pub final_em: f64,
    pub mean_post_warmup_entropy_gap: f64,
    pub final_search_frequency: f64,
}

/// Seed-averaged row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: String,
    pub variant: String,
    pub divergence: String,
    pub scope: String,
    pub seeds: usize,
    pub final_em: f64,
    pub mean_post_warmup_entropy_gap: f64,
    pub final_search_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub const TABLE: &'static str = "ablation.csv";
    pub const RUNS: &'static str = "ablation_runs.csv";

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(Self::TABLE))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join(Self::RUNS))?;
        for r in &self.runs {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Window over which the final search frequency is averaged.
const TAIL: usize = 10;

/// One run per (variant, seed). Bootstrapped parameters are shared across
/// variants of a seed, and configurations that coincide run once.
pub fn run_ablation_matrix(
    base: &TrainConfig,
    corpus: &Corpus,
    families: &[AblationFamily],
    seeds: &[u64],
    jobs: usize,
) -> Result<AblationReport> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let policy = Policy::new(PolicyShape::full(corpus.vocab().len()), corpus.vocab().markers())?;
    let mut init: BTreeMap<u64, PolicyParams> = BTreeMap::new();
    let mut done: BTreeMap<(String, u64), AblationRun> = BTreeMap::new();
    let mut report = AblationReport::default();

    for v in variants(families)? {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..v.apply(base) };
            let key = (cfg.to_toml()?, seed);
            let run = if let Some(r) = done.get(&key) {
                r.clone()
            } else {
                let start = match init.entry(seed) {
                    Entry::Occupied(e) => e.into_mut(),
                    Entry::Vacant(e) => e.insert(bootstrap_params(&policy, corpus, &cfg)?.0),
                };
                let mut trainer = Trainer::with_params(cfg.clone(), corpus.clone(), start.clone())?;
                trainer.set_jobs(jobs)?;
                let history = trainer.run(cfg.total_steps, None)?;
                let final_eval = trainer.evaluate();
                let tail = history.len().saturating_sub(TAIL);
                let r = AblationRun {
                    table: v.table.to_string(),
                    variant: v.name.clone(),
                    seed,
                    final_em: final_eval.em,
                    mean_post_warmup_entropy_gap: mean(
                        history
                            .iter()
                            .filter(|m| m.step >= cfg.t_warm)
                            .filter_map(|m| m.entropy_gap),
                    ),
                    final_search_frequency: mean(history[tail..].iter().map(|m| m.search_frequency)),
                };
                done.insert(key, r.clone());
                r
            };
            runs.push(AblationRun {
                table: v.table.to_string(),
                variant: v.name.clone(),
                ..run
            });
        }
        report.rows.push(AblationRow {
            table: v.table.to_string(),
            variant: v.name.clone(),
            divergence: v.divergence.name().to_string(),
            scope: match v.scope {
                ScopeKind::QueryPositions => "query".to_string(),
                ScopeKind::ActionPositions => "action".to_string(),
            },
            seeds: runs.len(),
            final_em: mean(runs.iter().map(|r| r.final_em)),
            mean_post_warmup_entropy_gap: mean(runs.iter().map(|r| r.mean_post_warmup_entropy_gap)),
            final_search_frequency: mean(runs.iter().map(|r| r.final_search_frequency)),
        });
        report.runs.extend(runs);
    }
    Ok(report)
}
