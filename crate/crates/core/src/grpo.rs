//! Group-relative advantages, the clipped surrogate, and the reference KL.
//!
//! The loss functions here work on per-token log-probabilities of the sampled
//! tokens and return gradients with respect to those log-probabilities, so
//! the trainer can run one policy forward per trajectory and share it between
//! every loss term. [`grpo_loss`] and [`kl_penalty`] wrap them with the
//! policy forward for standalone use.

use serde::{Deserialize, Serialize};

use crate::env::Question;
use crate::error::{Error, Result};
use crate::format::Trajectory;
use crate::policy::{Policy, PolicyParams, Probe};
use crate::scoring::token_f1;
use crate::vocab::Vocab;

/// `(R_i - mean) / std` with population std, or all zeros when std is 0.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    let n = g as f64;
    let total: f64 = rewards.iter().sum();
    // deviations scaled by n keep the arithmetic exact for dyadic rewards
    let dev: Vec<f64> = rewards.iter().map(|r| n * r - total).collect();
    let ss: f64 = dev.iter().map(|d| d * d).sum();
    if ss == 0.0 {
        return Ok(vec![0.0; g]);
    }
    let scale = (ss / n).sqrt();
    Ok(dev.iter().map(|d| d / scale).collect())
}

/// Token F1 between the trajectory's answer and the gold answer.
pub fn trajectory_reward(vocab: &Vocab, trajectory: &Trajectory, gold: &[u32]) -> f64 {
    token_f1(&vocab.surfaces(&trajectory.answer_text), &vocab.surfaces(gold))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub question: Question,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    /// Scores each trajectory against the gold answer and normalizes.
    pub fn new(vocab: &Vocab, question: Question, mut trajectories: Vec<Trajectory>) -> Result<Self> {
        let rewards: Vec<f64> = trajectories
            .iter()
            .map(|t| trajectory_reward(vocab, t, &question.gold_answer))
            .collect();
        for (t, r) in trajectories.iter_mut().zip(&rewards) {
            t.reward = *r;
        }
        let advantages = compute_advantages(&rewards)?;
        Ok(Self {
            question,
            trajectories,
            rewards,
            advantages,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn action_token_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.action_positions.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SurrogateTerms {
    /// Per trajectory, per action position.
    pub ratios: Vec<Vec<f64>>,
    pub clipped: Vec<Vec<bool>>,
    pub contributions: Vec<Vec<f64>>,
}

impl SurrogateTerms {
    pub fn clipped_fraction(&self) -> f64 {
        let n: usize = self.clipped.iter().map(Vec::len).sum();
        if n == 0 {
            return 0.0;
        }
        let c: usize = self.clipped.iter().flatten().filter(|&&c| c).count();
        c as f64 / n as f64
    }
}

/// Clipped surrogate from sampled-token log-probs under the current and the
/// old policy. Returns the loss, the per-token terms, and the gradient with
/// respect to the current log-probs.
pub fn surrogate(
    logp: &[Vec<f64>],
    logp_old: &[Vec<f64>],
    advantages: &[f64],
    epsilon: f64,
) -> (f64, SurrogateTerms, Vec<Vec<f64>>) {
    let n: usize = logp.iter().map(Vec::len).sum();
    let mut terms = SurrogateTerms::default();
    let mut grads = Vec::with_capacity(logp.len());
    let mut total = 0.0;
    for ((lp, lo), &adv) in logp.iter().zip(logp_old).zip(advantages) {
        let mut ratios = Vec::with_capacity(lp.len());
        let mut clipped = Vec::with_capacity(lp.len());
        let mut contrib = Vec::with_capacity(lp.len());
        let mut grad = Vec::with_capacity(lp.len());
        for (l, o) in lp.iter().zip(lo) {
            let r = (l - o).exp();
            let plain = r * adv;
            let clip = r.clamp(1.0 - epsilon, 1.0 + epsilon) * adv;
            let is_clipped = clip < plain;
            let c = if is_clipped { clip } else { plain };
            total += c;
            ratios.push(r);
            clipped.push(is_clipped);
            contrib.push(c);
            grad.push(if is_clipped || n == 0 { 0.0 } else { -plain / n as f64 });
        }
        terms.ratios.push(ratios);
        terms.clipped.push(clipped);
        terms.contributions.push(contrib);
        grads.push(grad);
    }
    let loss = if n == 0 { 0.0 } else { -total / n as f64 };
    (loss, terms, grads)
}

/// Mean over tokens of `exp(x) - x - 1` with `x = log pi_ref - log pi`,
/// plus its gradient with respect to `log pi`.
pub fn kl_estimator(logp: &[Vec<f64>], logp_ref: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let n: usize = logp.iter().map(Vec::len).sum();
    if n == 0 {
        return (0.0, logp.iter().map(|v| vec![0.0; v.len()]).collect());
    }
    let nf = n as f64;
    let mut total = 0.0;
    let grads = logp
        .iter()
        .zip(logp_ref)
        .map(|(lp, lr)| {
            lp.iter()
                .zip(lr)
                .map(|(l, r)| {
                    let x = r - l;
                    total += x.exp() - x - 1.0;
                    (1.0 - x.exp()) / nf
                })
                .collect()
        })
        .collect();
    (total / nf, grads)
}

/// Log-probabilities of the emitted tokens at every action position.
pub fn action_log_probs(policy: &Policy, params: &PolicyParams, t: &Trajectory, temperature: f64) -> Vec<f64> {
    let tokens = t.full_tokens();
    let q = t.question_tokens.len();
    let positions: Vec<usize> = t.action_positions.iter().map(|p| p + q).collect();
    let probe = Probe {
        tokens: &tokens,
        question_len: q,
        positions: &positions,
    };
    policy
        .forward(params, probe, temperature)
        .iter()
        .zip(&positions)
        .map(|(o, &p)| o.log_probs[tokens[p] as usize])
        .collect()
}

pub fn grpo_loss(
    policy: &Policy,
    params: &PolicyParams,
    params_old: &PolicyParams,
    group: &RolloutGroup,
    epsilon: f64,
    temperature: f64,
) -> (f64, SurrogateTerms) {
    let lp: Vec<Vec<f64>> = group
        .trajectories
        .iter()
        .map(|t| action_log_probs(policy, params, t, temperature))
        .collect();
    let lo: Vec<Vec<f64>> = group
        .trajectories
        .iter()
        .map(|t| action_log_probs(policy, params_old, t, temperature))
        .collect();
    let (loss, terms, _) = surrogate(&lp, &lo, &group.advantages, epsilon);
    (loss, terms)
}

pub fn kl_penalty(
    policy: &Policy,
    params: &PolicyParams,
    params_ref: &PolicyParams,
    group: &RolloutGroup,
    temperature: f64,
) -> f64 {
    let lp: Vec<Vec<f64>> = group
        .trajectories
        .iter()
        .map(|t| action_log_probs(policy, params, t, temperature))
        .collect();
    let lr: Vec<Vec<f64>> = group
        .trajectories
        .iter()
        .map(|t| action_log_probs(policy, params_ref, t, temperature))
        .collect();
    kl_estimator(&lp, &lr).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn advantage_examples() {
        assert_eq!(
            compute_advantages(&[1.0, 0.5, 0.0, 0.0, 0.0]).unwrap(),
            vec![1.75, 0.5, -0.75, -0.75, -0.75]
        );
        assert_eq!(compute_advantages(&[0.3; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(compute_advantages(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        assert!(matches!(compute_advantages(&[1.0]), Err(Error::GroupTooSmall(1))));
    }

    #[test]
    fn ratio_one_identity() {
        let lp = vec![vec![-1.0, -2.0], vec![-0.5], vec![-0.1, -0.2, -0.3]];
        let adv = [1.0, -0.5, 0.25];
        let (loss, terms, _) = surrogate(&lp, &lp, &adv, 0.2);
        let expected = -(2.0 * 1.0 + 1.0 * -0.5 + 3.0 * 0.25) / 6.0;
        assert!((loss - expected).abs() < 1e-15);
        assert!(terms.ratios.iter().flatten().all(|&r| r == 1.0));
        assert_eq!(terms.clipped_fraction(), 0.0);
    }

    #[test]
    fn clip_example() {
        let (loss, terms, grad) = surrogate(&[vec![1.5f64.ln()]], &[vec![0.0]], &[1.0], 0.2);
        assert!((loss + 1.2).abs() < 1e-12);
        assert!(terms.clipped[0][0]);
        assert_eq!(grad[0][0], 0.0);
    }

    #[test]
    fn zero_advantages_give_zero_loss_and_gradient() {
        let lp = vec![vec![-1.0, -0.3]];
        let (loss, _, grad) = surrogate(&lp, &[vec![-1.2, -0.1]], &[0.0], 0.2);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn kl_examples() {
        let (v, _) = kl_estimator(&[vec![0.5f64.ln()]], &[vec![0.25f64.ln()]]);
        let expected = 0.5 - 0.5f64.ln() - 1.0;
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.19315).abs() < 1e-5);
        let (z, _) = kl_estimator(&[vec![-1.0, -2.0]], &[vec![-1.0, -2.0]]);
        assert_eq!(z, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn advantages_are_standardized(rewards in prop::collection::vec(0.0f64..=1.0, 2..9)) {
            let adv = compute_advantages(&rewards).unwrap();
            let n = adv.len() as f64;
            let mean = rewards.iter().sum::<f64>() / n;
            let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
            if var > 1e-24 {
                let m: f64 = adv.iter().sum::<f64>() / n;
                let s = (adv.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(m.abs() < 1e-9);
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn advantages_are_shift_scale_invariant_and_equivariant(
            rewards in prop::collection::vec(0.0f64..=1.0, 2..9),
            c in -5.0f64..5.0,
            lambda in 0.01f64..100.0,
            rot in 0usize..8,
        ) {
            let base = compute_advantages(&rewards).unwrap();
            let shifted: Vec<f64> = rewards.iter().map(|r| r + c).collect();
            let scaled: Vec<f64> = rewards.iter().map(|r| r * lambda).collect();
            for (a, b) in base.iter().zip(compute_advantages(&shifted).unwrap()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in base.iter().zip(compute_advantages(&scaled).unwrap()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let k = rot % rewards.len();
            let mut perm = rewards.clone();
            perm.rotate_left(k);
            let mut expected = base.clone();
            expected.rotate_left(k);
            for (a, b) in compute_advantages(&perm).unwrap().iter().zip(&expected) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn kl_is_non_negative(a in prop::collection::vec(-20.0f64..0.0, 1..6), b in prop::collection::vec(-20.0f64..0.0, 1..6)) {
            let n = a.len().min(b.len());
            let (v, _) = kl_estimator(&[a[..n].to_vec()], &[b[..n].to_vec()]);
            prop_assert!(v >= 0.0);
        }
    }
}
