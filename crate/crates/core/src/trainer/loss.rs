//! Total loss `grpo + beta * kl + alpha * sd` over a prepared batch, with its
//! exact gradient. Old-policy and reference log-probs and teacher outputs are
//! inputs, so the loss is an explicit function of the current parameters only.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::distill::{sd_terms, DivergenceKind};
use crate::grpo::{kl_estimator, surrogate};
use crate::policy::{logit_grad_from_logp, Policy, PolicyParams, PositionOutput, Probe};
use crate::vocab::TokenId;

/// Teacher distributions for a subset of a trajectory's action positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    /// Indices into the trajectory's action-position list.
    pub action_index: Vec<usize>,
    pub outputs: Vec<PositionOutput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTrajectory {
    pub tokens: Vec<TokenId>,
    pub question_len: usize,
    /// Absolute indices into `tokens` of the action positions.
    pub positions: Vec<usize>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub teacher: Option<TeacherTargets>,
}

impl PreparedTrajectory {
    pub fn probe(&self) -> Probe<'_> {
        Probe {
            tokens: &self.tokens,
            question_len: self.question_len,
            positions: &self.positions,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedGroup {
    pub trajectories: Vec<PreparedTrajectory>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub epsilon: f64,
    pub beta: f64,
    pub alpha: f64,
    pub temperature: f64,
    pub divergence: DivergenceKind,
    pub trunc_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub grpo: f64,
    pub kl: f64,
    pub sd: f64,
    pub total: f64,
    pub clipped_fraction: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossTiming {
    pub grpo: f64,
    pub sd_backward: f64,
}

/// Log-probabilities of the emitted tokens under `params`.
pub fn sampled_log_probs(policy: &Policy, params: &PolicyParams, probe: Probe<'_>, temperature: f64) -> Vec<f64> {
    policy
        .forward(params, probe, temperature)
        .iter()
        .zip(probe.positions)
        .map(|(o, &p)| o.log_probs[probe.tokens[p] as usize])
        .collect()
}

pub fn total_loss(
    policy: &Policy,
    params: &PolicyParams,
    batch: &[PreparedGroup],
    w: &LossWeights,
) -> (LossBreakdown, Vec<f64>, LossTiming) {
    let mut grad = vec![0.0; params.theta.len()];
    let mut out = LossBreakdown::default();
    let mut timing = LossTiming::default();
    if batch.is_empty() {
        return (out, grad, timing);
    }
    let n_groups = batch.len() as f64;
    let n_traj: usize = batch.iter().map(|g| g.trajectories.len()).sum();
    let mut clipped = 0usize;
    let mut tokens = 0usize;

    for group in batch {
        let start = Instant::now();
        let fwds: Vec<_> = group
            .trajectories
            .iter()
            .map(|t| policy.forward_cached(params, t.probe(), w.temperature))
            .collect();
        let logp: Vec<Vec<f64>> = fwds
            .iter()
            .zip(&group.trajectories)
            .map(|(f, t)| {
                f.outputs
                    .iter()
                    .zip(&t.positions)
                    .map(|(o, &p)| o.log_probs[t.tokens[p] as usize])
                    .collect()
            })
            .collect();
        let old: Vec<Vec<f64>> = group.trajectories.iter().map(|t| t.logp_old.clone()).collect();
        let reference: Vec<Vec<f64>> = group.trajectories.iter().map(|t| t.logp_ref.clone()).collect();
        let (g_loss, terms, g_grad) = surrogate(&logp, &old, &group.advantages, w.epsilon);
        let (k_loss, k_grad) = kl_estimator(&logp, &reference);
        out.grpo += g_loss / n_groups;
        out.kl += k_loss / n_groups;
        clipped += terms.clipped.iter().flatten().filter(|&&c| c).count();
        tokens += terms.clipped.iter().map(Vec::len).sum::<usize>();

        let mut sd_parts = Vec::new();
        for (i, (f, t)) in fwds.iter().zip(&group.trajectories).enumerate() {
            let dlogits: Vec<Vec<f64>> = f
                .outputs
                .iter()
                .enumerate()
                .map(|(k, o)| {
                    let d = (g_grad[i][k] + w.beta * k_grad[i][k]) / n_groups;
                    let mut dl = vec![0.0; o.probs.len()];
                    dl[t.tokens[t.positions[k]] as usize] = d;
                    logit_grad_from_logp(&o.probs, &dl)
                })
                .collect();
            policy.backward(params, f, &dlogits, w.temperature, &mut grad);
            if let (Some(teacher), true) = (&t.teacher, w.alpha != 0.0) {
                sd_parts.push((i, teacher));
            }
        }
        timing.grpo += start.elapsed().as_secs_f64();

        let start = Instant::now();
        for (i, teacher) in sd_parts {
            let f = &fwds[i];
            let student: Vec<PositionOutput> = teacher.action_index.iter().map(|&k| f.outputs[k].clone()).collect();
            let (value, dl) = sd_terms(w.divergence, &teacher.outputs, &student, w.trunc_k);
            out.sd += value / n_traj as f64;
            let scale = w.alpha / n_traj as f64;
            let mut dlogits: Vec<Vec<f64>> = f.outputs.iter().map(|o| vec![0.0; o.probs.len()]).collect();
            for (&k, d) in teacher.action_index.iter().zip(dl) {
                dlogits[k] = d.into_iter().map(|x| x * scale).collect();
            }
            policy.backward(params, f, &dlogits, w.temperature, &mut grad);
        }
        timing.sd_backward += start.elapsed().as_secs_f64();
    }
    out.clipped_fraction = if tokens == 0 {
        0.0
    } else {
        clipped as f64 / tokens as f64
    };
    out.total = out.grpo + w.beta * out.kl + w.alpha * out.sd;
    (out, grad, timing)
}
