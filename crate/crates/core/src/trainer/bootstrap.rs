//! Supervised pretraining on scripted demonstrations.
//!
//! The demonstrator follows the question's relation chain through the
//! retriever, but answers early with probability `p_early_answer` after each
//! hop and corrupts query and answer tokens at the configured rates. The
//! student view is fit on every demonstration; the teacher view (student
//! context plus a hindsight block) is fit on the query positions of the
//! correct ones, which is where the policy learns to read the block.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::config::{BootstrapConfig, TrainConfig};
use crate::env::{Corpus, Question, Retriever};
use crate::error::Result;
use crate::format::{parse_with_markers, SpanKind, Trajectory};
use crate::grpo::RolloutGroup;
use crate::hindsight::{assemble_teacher_context, build_block, insertion_point, HindsightConfig, HindsightFlags};
use crate::optim::{Optimizer, OptimizerKind};
use crate::policy::{logit_grad_from_logp, Policy, PolicyParams, PositionOutput, Probe};
use crate::rng::{substream, Rng};
use crate::scoring::{outcome_label, Outcome};
use crate::vocab::{Markers, TokenId};

fn pick_other(rng: &mut Rng, pool: &[TokenId], avoid: TokenId) -> Option<TokenId> {
    let options: Vec<TokenId> = pool.iter().copied().filter(|&t| t != avoid).collect();
    options.choose(rng).copied()
}

/// Object of the retrieved fact whose subject and relation both occur in
/// the query, falling back to the top document's object.
fn follow(docs: &[Vec<TokenId>], query: &[TokenId]) -> Option<TokenId> {
    docs.iter()
        .find(|d| d.len() == 3 && query.contains(&d[0]) && query.contains(&d[1]))
        .or_else(|| docs.first())
        .and_then(|d| d.last().copied())
}

/// One demonstration body for `q`.
pub fn demo_body(
    q: &Question,
    retriever: &Retriever,
    k: usize,
    markers: &Markers,
    fillers: &[TokenId],
    cfg: &BootstrapConfig,
    rng: &mut Rng,
) -> Vec<TokenId> {
    let m = markers;
    let mut body = Vec::new();
    if !fillers.is_empty() && rng.gen::<f64>() < cfg.p_think {
        body.push(m.open_tag(SpanKind::Think));
        for _ in 0..rng.gen_range(1..=2) {
            body.push(*fillers.choose(rng).expect("fillers"));
        }
        body.push(m.close_tag(SpanKind::Think));
    }
    let prompt = &q.prompt_tokens;
    let hops = prompt.len().saturating_sub(1).max(1);
    let mut cur = prompt[0];
    let mut docs: Vec<Vec<TokenId>> = Vec::new();
    for h in 0..hops {
        if h > 0 && rng.gen::<f64>() < cfg.p_early_answer {
            break;
        }
        let rel = prompt.get(1 + h).copied().unwrap_or(prompt[0]);
        let mut pool: Vec<TokenId> = prompt.clone();
        pool.extend(docs.iter().flatten().copied());
        pool.sort_unstable();
        pool.dedup();
        let mut query = vec![cur, rel];
        for t in query.iter_mut() {
            if rng.gen::<f64>() < cfg.p_query_noise {
                if let Some(o) = pick_other(rng, &pool, *t) {
                    *t = o;
                }
            }
        }
        body.push(m.open_tag(SpanKind::Search));
        body.extend_from_slice(&query);
        body.push(m.close_tag(SpanKind::Search));
        docs = retriever.retrieve(&query, k).docs;
        body.push(m.open_tag(SpanKind::Documents));
        body.extend(docs.iter().flatten().copied());
        body.push(m.close_tag(SpanKind::Documents));
        cur = follow(&docs, &query).unwrap_or(cur);
    }
    let mut answer = cur;
    if rng.gen::<f64>() < cfg.p_answer_noise {
        let pool: Vec<TokenId> = docs.iter().flatten().copied().filter(|t| !m.is_tag(*t)).collect();
        if let Some(o) = pick_other(rng, &pool, answer) {
            answer = o;
        }
    }
    body.push(m.open_tag(SpanKind::Answer));
    body.push(answer);
    body.push(m.close_tag(SpanKind::Answer));
    body
}

/// A group of demonstrations for `q` with rewards attached.
#[allow(clippy::too_many_arguments)]
pub fn demo_group(
    corpus: &Corpus,
    retriever: &Retriever,
    q: &Question,
    g: usize,
    k: usize,
    cfg: &BootstrapConfig,
    seed: u64,
    step: u64,
) -> Result<RolloutGroup> {
    let markers = corpus.vocab().markers();
    let fillers = corpus.filler_ids();
    let trajs: Vec<Trajectory> = (0..g)
        .map(|i| {
            let mut rng = substream(seed, "bootstrap-demo", &[step, q.id as u64, i as u64]);
            let body = demo_body(q, retriever, k, &markers, &fillers, cfg, &mut rng);
            parse_with_markers(&body, markers).with_question(q.prompt_tokens.clone())
        })
        .collect();
    RolloutGroup::new(corpus.vocab(), q.clone(), trajs)
}

struct Target {
    tokens: Vec<TokenId>,
    question_len: usize,
    positions: Vec<usize>,
    weight: f64,
}

/// Teacher-view training context for a correct demonstration.
fn teacher_target(
    group: &RolloutGroup,
    i: usize,
    hcfg: &HindsightConfig,
    markers: &Markers,
    rng: &mut Rng,
) -> Result<Option<Target>> {
    let t = &group.trajectories[i];
    if t.malformed || t.query_positions.is_empty() || outcome_label(group.rewards[i], hcfg.rho) != Outcome::Correct {
        return Ok(None);
    }
    let ins = insertion_point(t, &t.query_positions).expect("non-empty");
    let block = build_block(group, i, hcfg, ins, markers, rng)?;
    let ctx = assemble_teacher_context(
        &t.question_tokens,
        &t.body_tokens,
        &block.rendered,
        ins,
        &t.query_positions,
    )?;
    Ok(Some(Target {
        positions: ctx.teacher_positions(&t.query_positions),
        tokens: ctx.tokens,
        question_len: ctx.question_len,
        weight: 0.0,
    }))
}

/// Runs the bootstrap and returns the resulting parameters together with
/// the mean negative log-likelihood of the final step.
pub fn bootstrap_params(policy: &Policy, corpus: &Corpus, cfg: &TrainConfig) -> Result<(PolicyParams, f64)> {
    let b = &cfg.bootstrap;
    let mut params = PolicyParams::random(policy.shape(), &mut substream(cfg.seed, "init", &[]), b.init_scale);
    if b.steps == 0 {
        return Ok((params, f64::NAN));
    }
    let (train, _) = corpus.split(cfg.corpus.n_eval);
    let retriever = corpus.retriever();
    let markers = corpus.vocab().markers();
    let hcfg = HindsightConfig {
        rho: cfg.rho,
        budget: cfg.hindsight_budget,
        flags: HindsightFlags::default(),
    };
    let mut opt = Optimizer::new(OptimizerKind::Adam, b.learning_rate, params.theta.len());
    let mut last = f64::NAN;
    for step in 0..b.steps as u64 {
        let mut pick = substream(cfg.seed, "bootstrap-batch", &[step]);
        let idx = rand::seq::index::sample(&mut pick, train.len(), b.batch_questions.min(train.len()));
        let mut student = Vec::new();
        let mut teacher = Vec::new();
        for qi in idx.iter() {
            let q = &train[qi];
            let group = demo_group(
                corpus,
                &retriever,
                q,
                cfg.group_size,
                cfg.retrieval_k,
                b,
                cfg.seed,
                step,
            )?;
            for (i, t) in group.trajectories.iter().enumerate() {
                student.push(Target {
                    tokens: t.full_tokens(),
                    question_len: t.question_tokens.len(),
                    positions: t.action_positions.iter().map(|p| p + t.question_tokens.len()).collect(),
                    weight: 0.0,
                });
                let mut rng = substream(cfg.seed, "bootstrap-labels", &[step, q.id as u64, i as u64]);
                if let Some(tt) = teacher_target(&group, i, &hcfg, &markers, &mut rng)? {
                    teacher.push(tt);
                }
            }
        }
        let ns: usize = student.iter().map(|s| s.positions.len()).sum();
        let nt: usize = teacher.iter().map(|s| s.positions.len()).sum();
        for s in student.iter_mut() {
            s.weight = 1.0 / ns.max(1) as f64;
        }
        for s in teacher.iter_mut() {
            s.weight = b.teacher_weight / nt.max(1) as f64;
        }
        let targets: Vec<&Target> = student.iter().chain(teacher.iter()).collect();
        let probes: Vec<Probe<'_>> = targets
            .iter()
            .map(|t| Probe {
                tokens: &t.tokens,
                question_len: t.question_len,
                positions: &t.positions,
            })
            .collect();
        let (loss, grad) = policy.grad_scalar(&params, &probes, 1.0, |outs: &[Vec<PositionOutput>]| {
            let mut total = 0.0;
            let grads = outs
                .iter()
                .zip(&targets)
                .map(|(o, t)| {
                    o.iter()
                        .zip(&t.positions)
                        .map(|(out, &p)| {
                            let tok = t.tokens[p] as usize;
                            total -= t.weight * out.log_probs[tok];
                            let mut d = vec![0.0; out.probs.len()];
                            d[tok] = -t.weight;
                            logit_grad_from_logp(&out.probs, &d)
                        })
                        .collect()
                })
                .collect();
            (total, grads)
        });
        opt.step(&mut params.theta, &grad);
        last = loss;
    }
    Ok((params, last))
}
