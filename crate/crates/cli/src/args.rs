use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "sdlab", version, about = "Hindsight self-distillation lab for search agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and write it as JSON.
    GenCorpus(GenCorpusArgs),
    /// Train a policy and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Run the ablation matrix and write the comparison tables.
    Ablate(AblateArgs),
    /// Trace per-token probabilities under student and teacher views.
    Trace(TraceArgs),
    /// Print the resolved configuration as TOML.
    Config(ConfigArgs),
    /// Print the hindsight block for one sampled rollout.
    RenderBlock(RenderBlockArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigSource {
    /// TOML file whose keys override the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base preset: toy or paper.
    #[arg(long, default_value = "toy")]
    pub preset: String,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    #[arg(long)]
    pub out: PathBuf,
    /// Corpus seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub entities: Option<usize>,
    #[arg(long)]
    pub relations: Option<usize>,
    /// Total questions (train plus eval).
    #[arg(long)]
    pub questions: Option<usize>,
    /// Generate only questions with this many hops.
    #[arg(long)]
    pub hops: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Disable distillation (alpha_sd = 0).
    #[arg(long)]
    pub baseline_grpo: bool,
    /// Threads for rollouts and evaluation.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Corpus JSON to train on instead of generating one from the config.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Override total_steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Stop after this many completed steps (the run can be resumed).
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Continue from a checkpoint; other config flags are ignored.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus JSON; its held-out split is evaluated.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Evaluate every question of the corpus instead of the held-out split.
    #[arg(long)]
    pub all: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Comma-separated: hindsight, objective, scope.
    #[arg(long, default_value = "hindsight,objective")]
    pub families: String,
    /// Number of seeds, starting at the config seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub question_id: usize,
    /// Group member to trace.
    #[arg(long, default_value_t = 0)]
    pub member: usize,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output CSV (default: trace_q<ID>.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Only validate; print nothing on success.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Args)]
pub struct RenderBlockArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub question_id: usize,
    #[arg(long, default_value_t = 0)]
    pub member: usize,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Print token ids instead of the text layout.
    #[arg(long)]
    pub tokens: bool,
}
