//! Autoregressive rollout generation with retriever-inserted documents.

use serde::{Deserialize, Serialize};

use super::categorical::Categorical;
use super::model::{Policy, PolicyParams};
use crate::env::{Question, RetrievalResult};
use crate::format::{parse_with_markers, SpanKind, SpanTracker, TrackEvent, Trajectory};
use crate::vocab::{Reserved, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutLimits {
    pub max_searches: usize,
    pub max_body_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Sample {
        temperature: f64,
    },
    /// Argmax, ties to the smallest id.
    Greedy,
}

/// A generated trajectory together with what the environment returned.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    /// One entry per search call within budget, in order.
    pub retrievals: Vec<RetrievalResult>,
    /// Search calls beyond the budget.
    pub overage: usize,
}

fn draw(dist: &Categorical, u: f64) -> TokenId {
    let mut acc = 0.0;
    for (i, &p) in dist.probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return dist.id_at(i);
        }
    }
    // rounding left u above the accumulated mass: take the last positive entry
    let last = dist.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    dist.id_at(last)
}

/// Generates one trajectory for `question`.
///
/// Generation stops at EOS, at the close of an answer span, at
/// `max_body_tokens` generated tokens, or as soon as the structure becomes
/// malformed. A policy-emitted documents opening tag also ends the rollout,
/// because documents are the environment's to insert.
pub fn sample_rollout<F>(
    policy: &Policy,
    params: &PolicyParams,
    question: &Question,
    mut retrieve: F,
    limits: RolloutLimits,
    decoding: Decoding,
    rng: &mut impl rand::Rng,
) -> Rollout
where
    F: FnMut(&[TokenId]) -> RetrievalResult,
{
    let m = policy.markers();
    let qlen = question.prompt_tokens.len();
    let mut ctx = question.prompt_tokens.clone();
    let mut tracker = SpanTracker::new(m);
    let mut generated = 0;
    let mut searches = 0;
    let mut retrievals = Vec::new();
    let mut overage = 0;
    let temperature = match decoding {
        Decoding::Sample { temperature } => temperature,
        Decoding::Greedy => 1.0,
    };

    while generated < limits.max_body_tokens {
        let dist = policy.next_token_dist(params, &ctx, qlen, temperature);
        let tok = match decoding {
            Decoding::Greedy => dist.argmax(),
            Decoding::Sample { .. } => draw(&dist, rng.gen::<f64>()),
        };
        let pos = ctx.len() - qlen;
        ctx.push(tok);
        generated += 1;
        match tracker.push(pos, tok) {
            TrackEvent::Malformed | TrackEvent::Stopped => break,
            TrackEvent::Opened(SpanKind::Documents) => break,
            TrackEvent::Closed(span) if span.kind == SpanKind::Answer => break,
            TrackEvent::Closed(span) if span.kind == SpanKind::Search => {
                searches += 1;
                let mut insert = vec![m.get(Reserved::OpenDocs)];
                if searches <= limits.max_searches {
                    let query = ctx[qlen + span.start..qlen + span.end].to_vec();
                    let res = retrieve(&query);
                    for d in &res.docs {
                        insert.extend_from_slice(d);
                    }
                    retrievals.push(res);
                } else {
                    overage += 1;
                    insert.push(m.get(Reserved::NoSearch));
                }
                insert.push(m.get(Reserved::CloseDocs));
                for t in insert {
                    let p = ctx.len() - qlen;
                    ctx.push(t);
                    tracker.push(p, t);
                }
            }
            _ => {}
        }
        if tok == m.get(Reserved::Eos) {
            break;
        }
    }

    let body = ctx.split_off(qlen);
    let trajectory = parse_with_markers(&body, m).with_question(ctx);
    Rollout {
        trajectory,
        retrievals,
        overage,
    }
}
