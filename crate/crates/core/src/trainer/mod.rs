//! Training loop: group rollouts, the combined GRPO/KL/distillation update,
//! evaluation, metrics, checkpoints, ablations and token traces.

pub mod ablation;
pub mod bootstrap;
pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod metrics;
pub mod trace;

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation_matrix, AblationFamily, AblationReport, AblationRow, AblationRun};
pub use bootstrap::bootstrap_params;
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_FORMAT};
pub use config::{BootstrapConfig, CorpusConfig, EvalDecoding, Preset, TrainConfig};
pub use loss::{total_loss, LossBreakdown, LossWeights, PreparedGroup, PreparedTrajectory, TeacherTargets};
pub use metrics::{read_metrics, MetricsSink, StageTimings, StepMetrics};
pub use trace::{trace_tokens, write_trace_csv, TraceRow};

use crate::distill::entropy_gap_terms;
use crate::env::{Corpus, Question, RetrievalResult, Retriever};
use crate::error::{Error, Result};
use crate::format::Trajectory;
use crate::grpo::RolloutGroup;
use crate::hindsight::{assemble_teacher_context, build_block, insertion_point};
use crate::optim::Optimizer;
use crate::policy::{sample_rollout, Decoding, Policy, PolicyParams, PolicyShape, Probe, Rollout, RolloutLimits};
use crate::rng::substream;
use crate::scoring::exact_match;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub em: f64,
    pub search_quality: f64,
    pub search_frequency: f64,
    pub n: usize,
}

/// Search-quality numerator and denominator over a set of rollouts.
fn doc_hits(rollouts: &[&Rollout]) -> (usize, usize) {
    rollouts.iter().fold((0, 0), |(h, n), r| {
        let hits: usize = r
            .retrievals
            .iter()
            .map(|x| x.hit_gold.iter().filter(|&&b| b).count())
            .sum();
        let docs: usize = r.retrievals.iter().map(|x| x.docs.len()).sum();
        (h + hits, n + docs)
    })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Runs `f` over `items`, on `pool` when given. Output order follows input
/// order either way.
fn map_jobs<T, R, F>(pool: Option<&rayon::ThreadPool>, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    match pool {
        Some(p) => p.install(|| items.into_par_iter().map(&f).collect()),
        None => items.into_iter().map(f).collect(),
    }
}

/// Everything needed to roll out and score against a corpus.
pub struct Env<'a> {
    pub corpus: &'a Corpus,
    pub retriever: &'a Retriever,
    pub policy: &'a Policy,
    pub config: &'a TrainConfig,
}

impl Env<'_> {
    pub fn limits(&self) -> RolloutLimits {
        RolloutLimits {
            max_searches: self.config.max_searches,
            max_body_tokens: self.config.max_body_tokens,
        }
    }

    pub fn rollout(
        &self,
        params: &PolicyParams,
        q: &Question,
        decoding: Decoding,
        stream: &str,
        key: &[u64],
    ) -> Rollout {
        let mut rng = substream(self.config.seed, stream, key);
        let k = self.config.retrieval_k;
        sample_rollout(
            self.policy,
            params,
            q,
            |query| {
                let mut r: RetrievalResult = self.retriever.retrieve(query, k);
                r.mark_gold(&q.gold_answer);
                r
            },
            self.limits(),
            decoding,
            &mut rng,
        )
    }

    /// `group_size` sampled rollouts for `q`, member `i` drawn from
    /// substream `(stream, key ++ [i])`.
    pub fn sample_group(
        &self,
        params: &PolicyParams,
        q: &Question,
        stream: &str,
        key: &[u64],
    ) -> Result<(RolloutGroup, Vec<Rollout>)> {
        let rollouts: Vec<Rollout> = (0..self.config.group_size as u64)
            .map(|i| {
                let mut k = key.to_vec();
                k.push(i);
                self.rollout(
                    params,
                    q,
                    Decoding::Sample {
                        temperature: self.config.temperature,
                    },
                    stream,
                    &k,
                )
            })
            .collect();
        let trajs: Vec<Trajectory> = rollouts.iter().map(|r| r.trajectory.clone()).collect();
        Ok((RolloutGroup::new(self.corpus.vocab(), q.clone(), trajs)?, rollouts))
    }
}

/// Exact match, search quality and search frequency over `questions`.
pub fn evaluate(
    env: &Env<'_>,
    params: &PolicyParams,
    questions: &[Question],
    step: usize,
    pool: Option<&rayon::ThreadPool>,
) -> EvalReport {
    let decoding = match env.config.eval_decoding {
        EvalDecoding::Greedy => Decoding::Greedy,
        EvalDecoding::Sample => Decoding::Sample { temperature: 1.0 },
    };
    let rollouts = map_jobs(pool, questions.iter().collect(), |q| {
        env.rollout(params, q, decoding, "eval", &[step as u64, q.id as u64])
    });
    let vocab = env.corpus.vocab();
    let hits = questions
        .iter()
        .zip(&rollouts)
        .filter(|(q, r)| {
            exact_match(
                &vocab.surfaces(&r.trajectory.answer_text),
                &vocab.surfaces(&q.gold_answer),
            )
        })
        .count();
    let refs: Vec<&Rollout> = rollouts.iter().collect();
    let (h, d) = doc_hits(&refs);
    let searches: usize = rollouts.iter().map(|r| r.trajectory.num_searches()).sum();
    EvalReport {
        em: ratio(hits, questions.len()),
        search_quality: ratio(h, d),
        search_frequency: ratio(searches, questions.len()),
        n: questions.len(),
    }
}

pub struct Trainer {
    config: TrainConfig,
    corpus: Corpus,
    corpus_hash: String,
    retriever: Retriever,
    policy: Policy,
    params: PolicyParams,
    ref_params: PolicyParams,
    optimizer: Optimizer,
    step: usize,
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    /// Bootstraps initial parameters and uses them as the reference policy.
    pub fn new(config: TrainConfig, corpus: Corpus) -> Result<Self> {
        let policy = Policy::new(PolicyShape::full(corpus.vocab().len()), corpus.vocab().markers())?;
        config.validate()?;
        let (init, _) = bootstrap_params(&policy, &corpus, &config)?;
        Self::with_params(config, corpus, init)
    }

    pub fn with_params(config: TrainConfig, corpus: Corpus, init: PolicyParams) -> Result<Self> {
        config.validate()?;
        let policy = Policy::new(PolicyShape::full(corpus.vocab().len()), corpus.vocab().markers())?;
        if init.shape != policy.shape() {
            return Err(Error::Shape(format!("initial parameters have shape {:?}", init.shape)));
        }
        if corpus.questions.len() < config.corpus.n_eval + config.batch_questions {
            return Err(Error::Config(format!(
                "corpus has {} questions; need n_eval ({}) plus at least batch_questions ({})",
                corpus.questions.len(),
                config.corpus.n_eval,
                config.batch_questions
            )));
        }
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate, init.theta.len());
        Ok(Self {
            corpus_hash: corpus.content_hash()?,
            retriever: corpus.retriever(),
            ref_params: init.clone(),
            params: init,
            policy,
            optimizer,
            step: 0,
            pool: None,
            config,
            corpus,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, corpus: Corpus) -> Result<Self> {
        let hash = corpus.content_hash()?;
        if hash != ckpt.corpus_hash {
            return Err(Error::Checkpoint("corpus does not match the checkpoint".into()));
        }
        let mut t = Self::with_params(ckpt.config.clone(), corpus, ckpt.params()?)?;
        t.ref_params = ckpt.ref_params()?;
        t.optimizer = Optimizer::from_state(&ckpt.optimizer, t.params.theta.len())?;
        t.step = ckpt.step;
        Ok(t)
    }

    /// Runs rollouts and evaluation on `jobs` threads (1 keeps everything on
    /// the calling thread).
    pub fn set_jobs(&mut self, jobs: usize) -> Result<()> {
        self.pool = if jobs > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(jobs)
                    .build()
                    .map_err(|e| Error::Config(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn ref_params(&self) -> &PolicyParams {
        &self.ref_params
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn env(&self) -> Env<'_> {
        Env {
            corpus: &self.corpus,
            retriever: &self.retriever,
            policy: &self.policy,
            config: &self.config,
        }
    }

    pub fn train_questions(&self) -> &[Question] {
        self.corpus.split(self.config.corpus.n_eval).0
    }

    pub fn eval_questions(&self) -> &[Question] {
        self.corpus.split(self.config.corpus.n_eval).1
    }

    pub fn evaluate(&self) -> EvalReport {
        evaluate(
            &self.env(),
            &self.params,
            self.eval_questions(),
            self.step,
            self.pool.as_ref(),
        )
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            shape: self.params.shape,
            step: self.step,
            rng: RngState {
                seed: self.config.seed,
                next_step: self.step,
            },
            theta: Checkpoint::encode_params(&self.params),
            ref_theta: Checkpoint::encode_params(&self.ref_params),
            optimizer: self.optimizer.state(),
            config: self.config.clone(),
            corpus_hash: self.corpus_hash.clone(),
        }
    }

    fn batch(&self, step: usize) -> Vec<Question> {
        let train = self.train_questions();
        let mut rng = substream(self.config.seed, "batch", &[step as u64]);
        rand::seq::index::sample(&mut rng, train.len(), self.config.batch_questions)
            .iter()
            .map(|i| train[i].clone())
            .collect()
    }

    /// One rollout batch and one optimizer update.
    pub fn train_step(&mut self) -> Result<(StepMetrics, StageTimings)> {
        let step = self.step;
        let cfg = self.config.clone();
        let mut timings = StageTimings {
            step,
            ..Default::default()
        };

        let clock = Instant::now();
        let eval = step.is_multiple_of(cfg.eval_every).then(|| self.evaluate());
        timings.eval = clock.elapsed().as_secs_f64();

        let env = self.env();
        let pool = self.pool.as_ref();
        let questions = self.batch(step);
        let clock = Instant::now();
        let params = &self.params;
        let sampled: Vec<Vec<Rollout>> = map_jobs(pool, questions.iter().collect(), |q| {
            (0..cfg.group_size as u64)
                .map(|i| {
                    env.rollout(
                        params,
                        q,
                        Decoding::Sample {
                            temperature: cfg.temperature,
                        },
                        "rollout",
                        &[step as u64, q.id as u64, i],
                    )
                })
                .collect()
        });
        timings.rollout = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let mut groups = Vec::with_capacity(questions.len());
        for (q, rs) in questions.iter().zip(&sampled) {
            let trajs = rs.iter().map(|r| r.trajectory.clone()).collect();
            groups.push(RolloutGroup::new(self.corpus.vocab(), q.clone(), trajs)?);
        }
        let all: Vec<&Rollout> = sampled.iter().flatten().collect();
        let n_roll = all.len();
        let (hits, docs) = doc_hits(&all);
        let mean_reward = groups.iter().flat_map(|g| g.rewards.iter()).sum::<f64>() / n_roll as f64;
        let searches: usize = all.iter().map(|r| r.trajectory.num_searches()).sum();
        let overage: usize = all.iter().map(|r| r.overage).sum();
        let malformed = all.iter().filter(|r| r.trajectory.malformed).count();
        timings.reward = clock.elapsed().as_secs_f64();

        // old-policy and reference log-probs; the snapshot is the current
        // parameters because each batch gets exactly one update
        let clock = Instant::now();
        let alpha = cfg.alpha_at(step);
        let hcfg = cfg.hindsight_config();
        let markers = self.corpus.vocab().markers();
        let mut prepared = Vec::with_capacity(groups.len());
        let mut gaps = Vec::new();
        let mut sd_count = 0;
        let mut sd_time = 0.0;
        for g in &groups {
            let mut trajs = Vec::with_capacity(g.len());
            for (i, t) in g.trajectories.iter().enumerate() {
                let q = t.question_tokens.len();
                let tokens = t.full_tokens();
                let positions: Vec<usize> = t.action_positions.iter().map(|p| p + q).collect();
                let probe = Probe {
                    tokens: &tokens,
                    question_len: q,
                    positions: &positions,
                };
                let student = self.policy.forward(&self.params, probe, cfg.temperature);
                let logp_old: Vec<f64> = student
                    .iter()
                    .zip(&positions)
                    .map(|(o, &p)| o.log_probs[tokens[p] as usize])
                    .collect();
                let logp_ref = loss::sampled_log_probs(&self.policy, &self.ref_params, probe, cfg.temperature);

                let sd_clock = Instant::now();
                let supervised = cfg.scope.positions(t);
                let teacher = if alpha > 0.0 && !t.malformed && !supervised.is_empty() {
                    let ins = insertion_point(t, supervised).expect("non-empty scope");
                    let mut rng = substream(
                        cfg.seed,
                        "shuffle-labels",
                        &[step as u64, g.question.id as u64, i as u64],
                    );
                    let block = build_block(g, i, &hcfg, ins, &markers, &mut rng)?;
                    let ctx =
                        assemble_teacher_context(&t.question_tokens, &t.body_tokens, &block.rendered, ins, supervised)?;
                    let tpos = ctx.teacher_positions(supervised);
                    let outputs = self.policy.forward(
                        &self.params,
                        Probe {
                            tokens: &ctx.tokens,
                            question_len: ctx.question_len,
                            positions: &tpos,
                        },
                        cfg.temperature,
                    );
                    let action_index: Vec<usize> = supervised
                        .iter()
                        .map(|p| {
                            t.action_positions
                                .binary_search(p)
                                .expect("scope within action positions")
                        })
                        .collect();
                    let student_sub: Vec<_> = action_index.iter().map(|&k| student[k].clone()).collect();
                    if let Some(gap) = entropy_gap_terms(&outputs, &student_sub) {
                        gaps.push(gap);
                    }
                    sd_count += 1;
                    Some(TeacherTargets { action_index, outputs })
                } else {
                    None
                };
                sd_time += sd_clock.elapsed().as_secs_f64();

                trajs.push(PreparedTrajectory {
                    tokens,
                    question_len: q,
                    positions,
                    logp_old,
                    logp_ref,
                    teacher,
                });
            }
            prepared.push(PreparedGroup {
                trajectories: trajs,
                advantages: g.advantages.clone(),
            });
        }
        let prep_time = clock.elapsed().as_secs_f64() - sd_time;

        let weights = LossWeights {
            epsilon: cfg.epsilon,
            beta: cfg.beta,
            alpha,
            temperature: cfg.temperature,
            divergence: cfg.divergence,
            trunc_k: cfg.trunc_k,
        };
        let (loss, grad, lt) = total_loss(&self.policy, &self.params, &prepared, &weights);
        timings.grpo = prep_time + lt.grpo;
        timings.sd_compute = sd_time;
        timings.sd_backward = lt.sd_backward;

        if !loss.total.is_finite() || grad.iter().any(|x| !x.is_finite()) {
            let ids: Vec<usize> = questions.iter().map(|q| q.id).collect();
            let detail = serde_json::json!({
                "loss": loss,
                "questions": ids,
                "non_finite_grad_entries": grad.iter().filter(|x| !x.is_finite()).count(),
            });
            return Err(Error::NonFinite {
                step,
                detail: detail.to_string(),
            });
        }

        let clock = Instant::now();
        self.optimizer.step(&mut self.params.theta, &grad);
        timings.optimizer = clock.elapsed().as_secs_f64();
        self.step += 1;

        let metrics = StepMetrics {
            step,
            mean_reward,
            eval_em: eval.map(|e| e.em),
            eval_search_quality: eval.map(|e| e.search_quality),
            eval_search_frequency: eval.map(|e| e.search_frequency),
            search_quality: ratio(hits, docs),
            search_frequency: ratio(searches, n_roll),
            overage: ratio(overage, n_roll),
            malformed_fraction: ratio(malformed, n_roll),
            entropy_gap: (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64),
            sd_trajectories: sd_count,
            alpha_eff: alpha,
            loss_grpo: loss.grpo,
            loss_sd: loss.sd,
            loss_kl: loss.kl,
            loss_total: loss.total,
            clipped_fraction: loss.clipped_fraction,
        };
        Ok((metrics, timings))
    }

    /// Trains until `until` completed steps (capped at `total_steps`),
    /// recording metrics and periodic checkpoints when `out` is given.
    pub fn run(&mut self, until: usize, out: Option<&Path>) -> Result<Vec<StepMetrics>> {
        let until = until.min(self.config.total_steps);
        let mut sink = out.map(MetricsSink::open).transpose()?;
        let mut history = Vec::new();
        while self.step < until {
            let (m, t) = self.train_step()?;
            if let Some(s) = sink.as_mut() {
                s.record(&m, &t)?;
            }
            history.push(m);
            if let Some(dir) = out {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step.is_multiple_of(every) {
                    self.checkpoint().save(&checkpoint_path(dir, self.step))?;
                }
            }
        }
        Ok(history)
    }
}

pub fn checkpoint_path(run_dir: &Path, step: usize) -> std::path::PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step:06}.json"))
}
