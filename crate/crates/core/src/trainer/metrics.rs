use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One record per optimizer step. Evaluation fields are filled on eval
/// steps, measured before that step's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub eval_em: Option<f64>,
    pub eval_search_quality: Option<f64>,
    pub eval_search_frequency: Option<f64>,
    /// Fraction of retrieved documents containing a gold answer token.
    pub search_quality: f64,
    /// Mean search calls per rollout, over-budget calls included.
    pub search_frequency: f64,
    /// Mean over-budget search calls per rollout.
    pub overage: f64,
    pub malformed_fraction: f64,
    pub entropy_gap: Option<f64>,
    /// Trajectories that received a distillation target this step.
    pub sd_trajectories: usize,
    pub alpha_eff: f64,
    pub loss_grpo: f64,
    pub loss_sd: f64,
    pub loss_kl: f64,
    pub loss_total: f64,
    pub clipped_fraction: f64,
}

/// Wall-clock seconds per stage. Kept apart from [`StepMetrics`] so metric
/// files stay byte-identical across runs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub step: usize,
    pub eval: f64,
    pub rollout: f64,
    pub reward: f64,
    pub grpo: f64,
    pub sd_compute: f64,
    pub sd_backward: f64,
    pub optimizer: f64,
}

fn open_append(path: &Path) -> Result<(File, bool)> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let f = OpenOptions::new().create(true).append(true).open(path)?;
    Ok((f, fresh))
}

/// Appends metrics to `metrics.jsonl`, `metrics.csv` and `timings.csv` in a
/// run directory. Reopening an existing directory continues the files.
pub struct MetricsSink {
    jsonl: BufWriter<File>,
    csv: csv::Writer<File>,
    timings: csv::Writer<File>,
}

impl MetricsSink {
    pub const JSONL: &'static str = "metrics.jsonl";
    pub const CSV: &'static str = "metrics.csv";
    pub const TIMINGS: &'static str = "timings.csv";

    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let (jsonl, _) = open_append(&dir.join(Self::JSONL))?;
        let (csv_file, fresh) = open_append(&dir.join(Self::CSV))?;
        let (t_file, t_fresh) = open_append(&dir.join(Self::TIMINGS))?;
        Ok(Self {
            jsonl: BufWriter::new(jsonl),
            csv: csv::WriterBuilder::new().has_headers(fresh).from_writer(csv_file),
            timings: csv::WriterBuilder::new().has_headers(t_fresh).from_writer(t_file),
        })
    }

    pub fn record(&mut self, m: &StepMetrics, t: &StageTimings) -> Result<()> {
        serde_json::to_writer(&mut self.jsonl, m)?;
        self.jsonl.write_all(b"\n")?;
        self.jsonl.flush()?;
        self.csv.serialize(m)?;
        self.csv.flush()?;
        self.timings.serialize(t)?;
        self.timings.flush()?;
        Ok(())
    }
}

/// Reads `metrics.jsonl` back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(step: usize) -> StepMetrics {
        StepMetrics {
            step,
            mean_reward: 0.25,
            eval_em: (step == 0).then_some(0.1),
            eval_search_quality: None,
            eval_search_frequency: None,
            search_quality: 0.5,
            search_frequency: 1.5,
            overage: 0.0,
            malformed_fraction: 0.0,
            entropy_gap: None,
            sd_trajectories: 0,
            alpha_eff: 0.0,
            loss_grpo: -0.1,
            loss_sd: 0.0,
            loss_kl: 1e-5,
            loss_total: -0.1,
            clipped_fraction: 0.0,
        }
    }

    #[test]
    fn reopened_sink_appends_without_second_header() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = MetricsSink::open(dir.path()).unwrap();
            s.record(&sample(0), &StageTimings::default()).unwrap();
        }
        {
            let mut s = MetricsSink::open(dir.path()).unwrap();
            s.record(&sample(1), &StageTimings::default()).unwrap();
        }
        let csv = std::fs::read_to_string(dir.path().join(MetricsSink::CSV)).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().next().unwrap().starts_with("step,mean_reward,eval_em"));
        let back = read_metrics(&dir.path().join(MetricsSink::JSONL)).unwrap();
        assert_eq!(back, vec![sample(0), sample(1)]);
    }
}
