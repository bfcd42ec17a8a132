use std::path::Path;

use serde::{Deserialize, Serialize};

use sdlab::trainer::{MetricsSink, TrainConfig};

pub const MANIFEST: &str = "manifest.json";
pub const CORPUS: &str = "corpus.json";
pub const SUMMARY: &str = "summary.json";
pub const CHECKPOINTS: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.json";

/// Relative paths of everything a run writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub corpus: String,
    pub metrics_jsonl: String,
    pub metrics_csv: String,
    pub timings_csv: String,
    pub checkpoints: String,
    pub summary: String,
}

impl Default for Artifacts {
    fn default() -> Self {
        Self {
            corpus: CORPUS.into(),
            metrics_jsonl: MetricsSink::JSONL.into(),
            metrics_csv: MetricsSink::CSV.into(),
            timings_csv: MetricsSink::TIMINGS.into(),
            checkpoints: CHECKPOINTS.into(),
            summary: SUMMARY.into(),
        }
    }
}

/// Written before the first step; with the corpus it pins down the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software: String,
    pub seed: u64,
    pub corpus_hash: String,
    pub config: TrainConfig,
    pub artifacts: Artifacts,
}

impl RunManifest {
    pub fn new(config: &TrainConfig, corpus_hash: String) -> Self {
        Self {
            software: format!("sdlab {}", env!("CARGO_PKG_VERSION")),
            seed: config.seed,
            corpus_hash,
            config: config.clone(),
            artifacts: Artifacts::default(),
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join(MANIFEST), text)
    }
}
