//! Command-line front end. [`run`] parses arguments, dispatches, and maps
//! failures to exit codes: 0 success, 1 other failure, 2 configuration or
//! usage error, 3 run aborted on a non-finite loss.

pub mod args;
pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::Serialize;

use sdlab::env::{generate_corpus, Corpus};
use sdlab::hindsight::{assemble_teacher_context, build_block, insertion_point};
use sdlab::rng::substream;
use sdlab::trainer::{
    checkpoint_path, evaluate, run_ablation_matrix, trace_tokens, write_trace_csv, AblationFamily, Checkpoint, Preset,
    TrainConfig, Trainer,
};
use sdlab::Error;

use args::{
    AblateArgs, Cli, Command, ConfigArgs, ConfigSource, EvalArgs, GenCorpusArgs, RenderBlockArgs, TraceArgs, TrainArgs,
};
use manifest::{RunManifest, CHECKPOINTS, CORPUS, FINAL_CHECKPOINT, SUMMARY};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Abort(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Abort(_) => EXIT_ABORT,
            CliError::Runtime(_) => EXIT_FAILURE,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Abort(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => CliError::Abort(e.to_string()),
            Error::Config(_)
            | Error::Vocab(_)
            | Error::UnknownToken(_)
            | Error::Corpus(_)
            | Error::Hindsight(_)
            | Error::Shape(_)
            | Error::Checkpoint(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Errors reading a user-named input are configuration errors.
fn input<T>(what: &str, path: &Path, r: sdlab::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Config(format!("cannot read {what} {}: {e}", path.display())))
}

fn io<T>(r: std::io::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Runtime(e.to_string()))
}

fn one_line(s: &str) -> String {
    s.lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("")
        .trim()
        .to_string()
}

/// Parses `args` (program name first), runs the command, and returns the
/// exit code. Diagnostics go to stderr as one line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    EXIT_OK
                }
                _ => {
                    eprintln!("{}", one_line(&e.to_string()));
                    EXIT_CONFIG
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", one_line(e.message()));
            e.code()
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenCorpus(a) => cmd_gen_corpus(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Trace(a) => cmd_trace(a),
        Command::Config(a) => cmd_config(a),
        Command::RenderBlock(a) => cmd_render_block(a),
    }
}

/// Preset, then the config file, then validation.
pub fn resolve_config(src: &ConfigSource) -> CliResult<TrainConfig> {
    let preset: Preset = src.preset.parse()?;
    let mut cfg = TrainConfig::preset(preset);
    if let Some(path) = &src.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        cfg = cfg.overlay_toml(&text)?;
    }
    Ok(cfg)
}

fn load_or_generate(cfg: &TrainConfig, path: Option<&Path>) -> CliResult<Corpus> {
    match path {
        Some(p) => input("corpus", p, Corpus::load(p)),
        None => Ok(generate_corpus(&cfg.corpus.spec())?),
    }
}

fn cmd_gen_corpus(a: GenCorpusArgs) -> CliResult<()> {
    let cfg = resolve_config(&a.source)?;
    let mut spec = cfg.corpus.spec();
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.entities {
        spec.n_entities = n;
    }
    if let Some(n) = a.relations {
        spec.n_relations = n;
    }
    if let Some(n) = a.questions {
        spec.n_questions = n;
    }
    if let Some(h) = a.hops {
        if !(1..=3).contains(&h) {
            return Err(CliError::Config("--hops must be 1, 2 or 3".into()));
        }
        spec.hop_mix = [0.0; 3];
        spec.hop_mix[h - 1] = 1.0;
    }
    let corpus = generate_corpus(&spec)?;
    io(corpus.save(&a.out).map_err(std::io::Error::other))?;
    println!(
        "entities {} relations {} facts {} questions {}",
        spec.n_entities,
        spec.n_relations,
        corpus.facts.len(),
        corpus.questions.len()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct Summary {
    steps: usize,
    final_em: f64,
    final_search_quality: f64,
    final_search_frequency: f64,
}

fn finish_run(trainer: &mut Trainer, out: &Path, until: usize) -> CliResult<()> {
    let result = trainer.run(until, Some(out));
    if let Err(Error::NonFinite { step, detail }) = &result {
        let dump = serde_json::json!({ "step": step, "detail": detail });
        let _ = std::fs::write(out.join("nan_dump.json"), dump.to_string());
    }
    result?;
    let ckpt = trainer.checkpoint();
    ckpt.save(&checkpoint_path(out, trainer.step()))?;
    if trainer.step() == trainer.config().total_steps {
        ckpt.save(&out.join(CHECKPOINTS).join(FINAL_CHECKPOINT))?;
        let e = trainer.evaluate();
        let s = Summary {
            steps: trainer.step(),
            final_em: e.em,
            final_search_quality: e.search_quality,
            final_search_frequency: e.search_frequency,
        };
        io(std::fs::write(
            out.join(SUMMARY),
            serde_json::to_string_pretty(&s).expect("summary"),
        ))?;
        println!("steps {} final EM {:.4}", s.steps, s.final_em);
    } else {
        println!("stopped after {} steps", trainer.step());
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    if let Some(ckpt_path) = &a.resume {
        let ckpt = input("checkpoint", ckpt_path, Checkpoint::load(ckpt_path))?;
        let corpus_path = a.corpus.clone().unwrap_or_else(|| a.out.join(CORPUS));
        let corpus = input("corpus", &corpus_path, Corpus::load(&corpus_path))?;
        let mut trainer = Trainer::from_checkpoint(&ckpt, corpus)?;
        trainer.set_jobs(a.jobs)?;
        let until = a.stop_after.unwrap_or(usize::MAX);
        return finish_run(&mut trainer, &a.out, until);
    }

    let mut cfg = resolve_config(&a.source)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.total_steps = n;
    }
    if a.baseline_grpo {
        cfg.alpha_sd = 0.0;
    }
    cfg.validate()?;
    let corpus = load_or_generate(&cfg, a.corpus.as_deref())?;
    io(std::fs::create_dir_all(&a.out))?;
    io(corpus.save(a.out.join(CORPUS)).map_err(std::io::Error::other))?;
    RunManifest::new(&cfg, corpus.content_hash()?)
        .write(&a.out)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut trainer = Trainer::new(cfg, corpus)?;
    trainer.set_jobs(a.jobs)?;
    let until = a.stop_after.unwrap_or(usize::MAX);
    finish_run(&mut trainer, &a.out, until)
}

/// `corpus.json` beside the checkpoint's directory or the run directory.
fn find_corpus(ckpt: &Path, explicit: Option<&Path>) -> CliResult<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    let mut dir = ckpt.parent();
    for _ in 0..2 {
        if let Some(d) = dir {
            let c = d.join(CORPUS);
            if c.exists() {
                return Ok(c);
            }
            dir = d.parent();
        }
    }
    Err(CliError::Config(format!(
        "no {CORPUS} found near {}; pass --corpus",
        ckpt.display()
    )))
}

fn trainer_from(ckpt_path: &Path, corpus: Option<&Path>) -> CliResult<Trainer> {
    let ckpt = input("checkpoint", ckpt_path, Checkpoint::load(ckpt_path))?;
    let cpath = find_corpus(ckpt_path, corpus)?;
    let corpus = input("corpus", &cpath, Corpus::load(&cpath))?;
    Ok(Trainer::from_checkpoint(&ckpt, corpus)?)
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let ckpt = input("checkpoint", &a.checkpoint, Checkpoint::load(&a.checkpoint))?;
    let cpath = find_corpus(&a.checkpoint, a.split.as_deref())?;
    let corpus = input("corpus", &cpath, Corpus::load(&cpath))?;
    if corpus.vocab().len() != ckpt.shape.vocab {
        return Err(CliError::Config(format!(
            "corpus vocabulary has {} tokens, checkpoint expects {}",
            corpus.vocab().len(),
            ckpt.shape.vocab
        )));
    }
    let policy = sdlab::policy::Policy::new(ckpt.shape, corpus.vocab().markers())?;
    let params = ckpt.params()?;
    let cfg = ckpt.config.clone();
    let retriever = corpus.retriever();
    let questions = if a.all {
        &corpus.questions[..]
    } else {
        corpus.split(cfg.corpus.n_eval.min(corpus.questions.len())).1
    };
    let env = sdlab::trainer::Env {
        corpus: &corpus,
        retriever: &retriever,
        policy: &policy,
        config: &cfg,
    };
    let report = evaluate(&env, &params, questions, ckpt.step, None);
    let json = serde_json::to_string_pretty(&report).expect("report");
    println!("EM {:.4}", report.em);
    println!("{json}");
    if let Some(p) = &a.report {
        io(std::fs::write(p, &json))?;
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CliResult<()> {
    let mut cfg = resolve_config(&a.source)?;
    if let Some(n) = a.steps {
        cfg.total_steps = n;
    }
    cfg.validate()?;
    let families = a
        .families
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<sdlab::Result<Vec<AblationFamily>>>()?;
    if families.is_empty() {
        return Err(CliError::Config("--families needs at least one family".into()));
    }
    if a.seeds == 0 {
        return Err(CliError::Config("--seeds must be positive".into()));
    }
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| cfg.seed + i).collect();
    let corpus = load_or_generate(&cfg, a.corpus.as_deref())?;
    let report = run_ablation_matrix(&cfg, &corpus, &families, &seeds, a.jobs)?;
    report.write(&a.out)?;
    println!(
        "{:<10} {:<16} {:>9} {:>12} {:>10}",
        "table", "variant", "final_em", "entropy_gap", "search_freq"
    );
    for r in &report.rows {
        println!(
            "{:<10} {:<16} {:>9.4} {:>12.4} {:>10.3}",
            r.table, r.variant, r.final_em, r.mean_post_warmup_entropy_gap, r.final_search_frequency
        );
    }
    Ok(())
}

fn cmd_trace(a: TraceArgs) -> CliResult<()> {
    let trainer = trainer_from(&a.checkpoint, a.corpus.as_deref())?;
    let corpus = trainer.corpus();
    let q = corpus
        .questions
        .iter()
        .find(|q| q.id == a.question_id)
        .ok_or_else(|| CliError::Config(format!("no question with id {}", a.question_id)))?;
    let cfg = trainer.config();
    if a.member >= cfg.group_size {
        return Err(CliError::Config(format!(
            "--member must be below group size {}",
            cfg.group_size
        )));
    }
    let (group, _) = trainer
        .env()
        .sample_group(trainer.params(), q, "trace", &[q.id as u64])?;
    let rows = trace_tokens(
        trainer.policy(),
        trainer.params(),
        corpus.vocab(),
        &group,
        a.member,
        cfg,
    )?;
    let out = a.out.unwrap_or_else(|| PathBuf::from(format!("trace_q{}.csv", q.id)));
    write_trace_csv(&rows, &out)?;
    println!("{} rows written to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_config(a: ConfigArgs) -> CliResult<()> {
    let cfg = resolve_config(&a.source)?;
    cfg.validate()?;
    if !a.check {
        print!("{}", cfg.to_toml()?);
    }
    Ok(())
}

fn cmd_render_block(a: RenderBlockArgs) -> CliResult<()> {
    let trainer = trainer_from(&a.checkpoint, a.corpus.as_deref())?;
    let corpus = trainer.corpus();
    let cfg = trainer.config();
    let q = corpus
        .questions
        .iter()
        .find(|q| q.id == a.question_id)
        .ok_or_else(|| CliError::Config(format!("no question with id {}", a.question_id)))?;
    if a.member >= cfg.group_size {
        return Err(CliError::Config(format!(
            "--member must be below group size {}",
            cfg.group_size
        )));
    }
    let (group, _) = trainer
        .env()
        .sample_group(trainer.params(), q, "trace", &[q.id as u64])?;
    let t = &group.trajectories[a.member];
    let supervised = cfg.scope.positions(t);
    let Some(ins) = insertion_point(t, supervised) else {
        println!("member {} has no supervised positions; no block", a.member);
        return Ok(());
    };
    let mut rng = substream(cfg.seed, "trace-labels", &[q.id as u64, a.member as u64]);
    let markers = corpus.vocab().markers();
    let block = build_block(&group, a.member, &cfg.hindsight_config(), ins, &markers, &mut rng)?;
    if a.tokens {
        let ctx = assemble_teacher_context(&t.question_tokens, &t.body_tokens, &block.rendered, ins, supervised)?;
        println!("{}", corpus.vocab().decode(&ctx.tokens));
    } else {
        print!("{}", block.to_text(corpus.vocab()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_errors_map_to_exit_codes() {
        let abort: CliError = Error::NonFinite {
            step: 3,
            detail: "{}".into(),
        }
        .into();
        assert_eq!(abort.code(), EXIT_ABORT);
        assert_eq!(CliError::from(Error::Config("x".into())).code(), EXIT_CONFIG);
        assert_eq!(CliError::from(Error::Checkpoint("x".into())).code(), EXIT_CONFIG);
        let io = Error::Io(std::io::Error::other("disk"));
        assert_eq!(CliError::from(io).code(), EXIT_FAILURE);
    }

    #[test]
    fn diagnostics_are_single_lines() {
        assert_eq!(one_line("\n  first\nsecond"), "first");
        assert_eq!(run(["sdlab", "--help"]), EXIT_OK);
        assert_eq!(run(["sdlab", "nope"]), EXIT_CONFIG);
    }
}
