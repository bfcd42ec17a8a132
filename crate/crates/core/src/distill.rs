//! Token-level self-distillation between the hindsight teacher and the student.
//!
//! Teacher distributions are plain values computed by a forward pass; no
//! gradient is ever propagated into them. All gradients returned here are
//! with respect to the student's tempered logits.

use serde::{Deserialize, Serialize};

use crate::format::Trajectory;
use crate::hindsight::TeacherContext;
use crate::policy::{logit_grad_from_probs, Categorical, Policy, PolicyParams, PositionOutput, Probe, Support};
use crate::vocab::TokenId;

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    #[default]
    Jsd,
    ForwardKl,
    ReverseKl,
    LogitMse,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 4] = [
        DivergenceKind::Jsd,
        DivergenceKind::ForwardKl,
        DivergenceKind::ReverseKl,
        DivergenceKind::LogitMse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DivergenceKind::Jsd => "jsd",
            DivergenceKind::ForwardKl => "forward_kl",
            DivergenceKind::ReverseKl => "reverse_kl",
            DivergenceKind::LogitMse => "logit_mse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKind {
    #[default]
    QueryPositions,
    ActionPositions,
}

impl ScopeKind {
    pub fn positions(self, t: &Trajectory) -> &[usize] {
        match self {
            ScopeKind::QueryPositions => &t.query_positions,
            ScopeKind::ActionPositions => &t.action_positions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdConfig {
    pub kind: DivergenceKind,
    pub scope: ScopeKind,
    pub top_k: usize,
}

/// Indices of the `k` largest entries, larger probability first, ties to
/// the smaller index.
pub fn top_k_indices(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Sorted union of both top-k id sets.
pub fn union_support(p: &[f64], q: &[f64], k: usize) -> Vec<usize> {
    let mut ids = top_k_indices(p, k);
    ids.extend(top_k_indices(q, k));
    ids.sort_unstable();
    ids.dedup();
    ids
}

fn restrict(probs: &[f64], support: &[usize]) -> Vec<f64> {
    let z: f64 = support.iter().map(|&i| probs[i]).sum();
    support.iter().map(|&i| probs[i] / z).collect()
}

/// Restricts two full-support distributions to the union of their top-k ids
/// and renormalizes each. With `k >= |V|` both come back unchanged.
pub fn truncate_pair(p: &Categorical, q: &Categorical, k: usize) -> (Categorical, Categorical) {
    assert!(
        p.support == Support::Full && q.support == Support::Full,
        "truncate_pair expects full-support inputs"
    );
    assert_eq!(p.len(), q.len());
    if k >= p.len() {
        return (p.clone(), q.clone());
    }
    let support = union_support(&p.probs, &q.probs, k);
    let ids: Vec<TokenId> = support.iter().map(|&i| i as TokenId).collect();
    (
        Categorical {
            support: Support::Truncated(ids.clone()),
            probs: restrict(&p.probs, &support),
        },
        Categorical {
            support: Support::Truncated(ids),
            probs: restrict(&q.probs, &support),
        },
    )
}

fn xlogy_ratio(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / y).ln()
    }
}

/// Divergence between teacher `p` and student `q` over a shared support.
/// Logits are used only by `LogitMse` and must be restricted to the same support.
pub fn divergence(
    kind: DivergenceKind,
    p: &[f64],
    q: &[f64],
    logits_p: Option<&[f64]>,
    logits_q: Option<&[f64]>,
) -> f64 {
    assert_eq!(p.len(), q.len());
    match kind {
        DivergenceKind::Jsd => {
            let mut total = 0.0;
            for (&a, &b) in p.iter().zip(q) {
                let m = 0.5 * (a + b);
                total += 0.5 * xlogy_ratio(a, m) + 0.5 * xlogy_ratio(b, m);
            }
            total
        }
        DivergenceKind::ForwardKl => p
            .iter()
            .zip(q)
            .map(|(&a, &b)| if a == 0.0 { 0.0 } else { a * (a / b.max(LOG_FLOOR)).ln() })
            .sum(),
        DivergenceKind::ReverseKl => q
            .iter()
            .zip(p)
            .map(|(&b, &a)| if b == 0.0 { 0.0 } else { b * (b / a.max(LOG_FLOOR)).ln() })
            .sum(),
        DivergenceKind::LogitMse => {
            let lp = logits_p.expect("LogitMse needs teacher logits");
            let lq = logits_q.expect("LogitMse needs student logits");
            assert_eq!(lp.len(), lq.len());
            if lp.is_empty() {
                return 0.0;
            }
            lp.iter().zip(lq).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / lp.len() as f64
        }
    }
}

/// Divergence at one position after truncation, with its gradient w.r.t.
/// the student's tempered logits over the full vocabulary.
pub fn position_term(
    kind: DivergenceKind,
    teacher: &PositionOutput,
    student: &PositionOutput,
    k: usize,
) -> (f64, Vec<f64>) {
    let v = student.probs.len();
    let support: Vec<usize> = if k >= v {
        (0..v).collect()
    } else {
        union_support(&teacher.probs, &student.probs, k)
    };
    let p = restrict(&teacher.probs, &support);
    let zq: f64 = support.iter().map(|&i| student.probs[i]).sum();
    let q: Vec<f64> = support.iter().map(|&i| student.probs[i] / zq).collect();

    if kind == DivergenceKind::LogitMse {
        let lp: Vec<f64> = support.iter().map(|&i| teacher.logits[i]).collect();
        let lq: Vec<f64> = support.iter().map(|&i| student.logits[i]).collect();
        let value = divergence(kind, &p, &q, Some(&lp), Some(&lq));
        let n = support.len() as f64;
        let mut dl = vec![0.0; v];
        for (j, &i) in support.iter().enumerate() {
            dl[i] = -2.0 * (lp[j] - lq[j]) / n;
        }
        return (value, dl);
    }

    let value = divergence(kind, &p, &q, None, None);
    // gradient w.r.t. the renormalized student q'
    let dq_trunc: Vec<f64> = p
        .iter()
        .zip(&q)
        .map(|(&a, &b)| match kind {
            DivergenceKind::Jsd => {
                let m = 0.5 * (a + b);
                if b == 0.0 {
                    0.0
                } else {
                    0.5 * (b / m).ln()
                }
            }
            DivergenceKind::ForwardKl => {
                if a == 0.0 || b < LOG_FLOOR {
                    0.0
                } else {
                    -a / b
                }
            }
            DivergenceKind::ReverseKl => {
                if b == 0.0 {
                    0.0
                } else {
                    (b / a.max(LOG_FLOOR)).ln() + 1.0
                }
            }
            DivergenceKind::LogitMse => unreachable!(),
        })
        .collect();
    // through the renormalization q'_i = q_i / Z
    let dot: f64 = q.iter().zip(&dq_trunc).map(|(a, b)| a * b).sum();
    let mut dq = vec![0.0; v];
    for (j, &i) in support.iter().enumerate() {
        dq[i] = (dq_trunc[j] - dot) / zq;
    }
    (value, logit_grad_from_probs(&student.probs, &dq))
}

/// Mean divergence over positions and the per-position logit gradients
/// (already divided by the number of positions). Empty input gives zero.
pub fn sd_terms(
    kind: DivergenceKind,
    teacher: &[PositionOutput],
    student: &[PositionOutput],
    k: usize,
) -> (f64, Vec<Vec<f64>>) {
    assert_eq!(teacher.len(), student.len());
    if student.is_empty() {
        return (0.0, Vec::new());
    }
    let n = student.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(student.len());
    for (t, s) in teacher.iter().zip(student) {
        let (v, mut g) = position_term(kind, t, s, k);
        total += v;
        g.iter_mut().for_each(|x| *x /= n);
        grads.push(g);
    }
    (total / n, grads)
}

/// Mean of `H(student) - H(teacher)` on untruncated distributions.
pub fn entropy_gap_terms(teacher: &[PositionOutput], student: &[PositionOutput]) -> Option<f64> {
    if student.is_empty() {
        return None;
    }
    let h = |o: &PositionOutput| -> f64 {
        -o.probs
            .iter()
            .zip(&o.log_probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, l)| p * l)
            .sum::<f64>()
    };
    let total: f64 = teacher.iter().zip(student).map(|(t, s)| h(s) - h(t)).sum();
    Some(total / student.len() as f64)
}

fn teacher_outputs(
    policy: &Policy,
    params: &PolicyParams,
    ctx: &TeacherContext,
    positions: &[usize],
    temperature: f64,
) -> Vec<PositionOutput> {
    let tp = ctx.teacher_positions(positions);
    policy.forward(
        params,
        Probe {
            tokens: &ctx.tokens,
            question_len: ctx.question_len,
            positions: &tp,
        },
        temperature,
    )
}

/// Distillation loss and its gradient with the teacher evaluated under
/// `teacher_params` and the student under `params`.
#[allow(clippy::too_many_arguments)]
pub fn sd_loss_with_teacher(
    policy: &Policy,
    params: &PolicyParams,
    teacher_params: &PolicyParams,
    teacher_ctx: &TeacherContext,
    trajectory: &Trajectory,
    cfg: &SdConfig,
    temperature: f64,
) -> (f64, Vec<f64>) {
    let positions = cfg.scope.positions(trajectory);
    if positions.is_empty() {
        return (0.0, vec![0.0; params.theta.len()]);
    }
    let teacher = teacher_outputs(policy, teacher_params, teacher_ctx, positions, temperature);
    let tokens = trajectory.full_tokens();
    let q = trajectory.question_tokens.len();
    let sp: Vec<usize> = positions.iter().map(|p| p + q).collect();
    let probe = Probe {
        tokens: &tokens,
        question_len: q,
        positions: &sp,
    };
    policy.grad_scalar(params, &[probe], temperature, |outs| {
        let (v, g) = sd_terms(cfg.kind, &teacher, &outs[0], cfg.top_k);
        (v, vec![g])
    })
}

/// Distillation loss with a detached teacher built from the same parameters.
pub fn sd_loss(
    policy: &Policy,
    params: &PolicyParams,
    teacher_ctx: &TeacherContext,
    trajectory: &Trajectory,
    cfg: &SdConfig,
    temperature: f64,
) -> (f64, Vec<f64>) {
    sd_loss_with_teacher(policy, params, params, teacher_ctx, trajectory, cfg, temperature)
}

pub fn entropy_gap(
    policy: &Policy,
    params: &PolicyParams,
    teacher_ctx: &TeacherContext,
    trajectory: &Trajectory,
    scope: ScopeKind,
    temperature: f64,
) -> Option<f64> {
    let positions = scope.positions(trajectory);
    let teacher = teacher_outputs(policy, params, teacher_ctx, positions, temperature);
    let tokens = trajectory.full_tokens();
    let q = trajectory.question_tokens.len();
    let sp: Vec<usize> = positions.iter().map(|p| p + q).collect();
    let student = policy.forward(
        params,
        Probe {
            tokens: &tokens,
            question_len: q,
            positions: &sp,
        },
        temperature,
    );
    entropy_gap_terms(&teacher, &student)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn output_from_logits(logits: Vec<f64>) -> PositionOutput {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let log_probs: Vec<f64> = logits.iter().map(|l| l - lse).collect();
        PositionOutput {
            probs: log_probs.iter().map(|l| l.exp()).collect(),
            log_probs,
            logits,
        }
    }

    #[test]
    fn jsd_reference_values() {
        let d = |p: &[f64], q: &[f64]| divergence(DivergenceKind::Jsd, p, q, None, None);
        assert_eq!(d(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!((d(&[1.0, 0.0], &[0.0, 1.0]) - 2f64.ln()).abs() < 1e-12);
        // M = (0.75, 0.25):
        // KL(P||M) = 0.5 ln(0.5/0.75) + 0.5 ln(0.5/0.25), KL(Q||M) = ln(1/0.75)
        let oracle = 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln()) + 0.5 * (1.0f64 / 0.75).ln();
        let v = d(&[0.5, 0.5], &[1.0, 0.0]);
        assert!((v - oracle).abs() < 1e-15);
        assert!((v - 0.215_761_554_338_835_7).abs() < 1e-14);
    }

    #[test]
    fn truncation_worked_example() {
        let p = Categorical::full(vec![0.7, 0.2, 0.05, 0.05]);
        let q = Categorical::full(vec![0.1, 0.6, 0.2, 0.1]);
        let (pt, qt) = truncate_pair(&p, &q, 1);
        assert_eq!(pt.support, Support::Truncated(vec![0, 1]));
        assert!((pt.probs[0] - 7.0 / 9.0).abs() < 1e-15 && (pt.probs[1] - 2.0 / 9.0).abs() < 1e-15);
        assert!((qt.probs[0] - 1.0 / 7.0).abs() < 1e-15 && (qt.probs[1] - 6.0 / 7.0).abs() < 1e-15);
        let (pf, qf) = truncate_pair(&p, &q, 4);
        assert_eq!((pf, qf), (p.clone(), q.clone()));
        let (a, b) = truncate_pair(&p, &p, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn ties_prefer_smaller_ids() {
        assert_eq!(top_k_indices(&[0.25, 0.25, 0.25, 0.25], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.1, 0.3, 0.3, 0.3], 1), vec![1]);
    }

    #[test]
    fn kl_variants_differ_and_vanish_at_equality() {
        let p = [0.8, 0.15, 0.05];
        let q = [0.3, 0.3, 0.4];
        let f = divergence(DivergenceKind::ForwardKl, &p, &q, None, None);
        let r = divergence(DivergenceKind::ReverseKl, &p, &q, None, None);
        assert!((f - r).abs() > 1e-3);
        assert_eq!(divergence(DivergenceKind::ForwardKl, &p, &p, None, None), 0.0);
        assert_eq!(divergence(DivergenceKind::ReverseKl, &q, &q, None, None), 0.0);
        let f0 = divergence(DivergenceKind::ForwardKl, &[0.5, 0.5], &[1.0, 0.0], None, None);
        assert!(f0.is_finite());
    }

    #[test]
    fn position_gradients_match_finite_differences() {
        let teacher = output_from_logits(vec![1.2, -0.3, 0.4, 2.0, -1.0, 0.0]);
        let base = vec![0.3, 0.9, -0.7, 0.1, 1.5, -0.2];
        for kind in DivergenceKind::ALL {
            for k in [2, 3, 6] {
                let (_, g) = position_term(kind, &teacher, &output_from_logits(base.clone()), k);
                for i in 0..base.len() {
                    let h = 1e-6;
                    let mut up = base.clone();
                    up[i] += h;
                    let mut dn = base.clone();
                    dn[i] -= h;
                    let fd = (position_term(kind, &teacher, &output_from_logits(up), k).0
                        - position_term(kind, &teacher, &output_from_logits(dn), k).0)
                        / (2.0 * h);
                    assert!((fd - g[i]).abs() < 1e-7, "{kind:?} k={k} i={i}: fd {fd} vs {}", g[i]);
                }
            }
        }
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("positive mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn jsd_is_symmetric_and_bounded((p, q) in (2usize..12).prop_flat_map(|n| (dist(n), dist(n)))) {
            let a = divergence(DivergenceKind::Jsd, &p, &q, None, None);
            let b = divergence(DivergenceKind::Jsd, &q, &p, None, None);
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= 0.0 && a <= 2f64.ln() + 1e-12);
        }

        #[test]
        fn truncation_renormalizes((p, q) in (2usize..12).prop_flat_map(|n| (dist(n), dist(n))), k in 1usize..6) {
            let (pt, qt) = truncate_pair(&Categorical::full(p.clone()), &Categorical::full(q.clone()), k);
            prop_assert!(pt.is_valid(1e-9) && qt.is_valid(1e-9));
            let (pf, qf) = truncate_pair(&Categorical::full(p.clone()), &Categorical::full(q.clone()), p.len());
            let full = divergence(DivergenceKind::Jsd, &p, &q, None, None);
            prop_assert!((divergence(DivergenceKind::Jsd, &pf.probs, &qf.probs, None, None) - full).abs() < 1e-10);
        }
    }
}
