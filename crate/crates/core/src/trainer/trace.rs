//! Per-token probability traces under three conditions: the student, the
//! teacher with the real hindsight block, and the teacher with every
//! outcome label flipped.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::Result;
use crate::grpo::RolloutGroup;
use crate::hindsight::{assemble_teacher_context, build_block, insertion_point, HindsightConfig};
use crate::policy::{Policy, PolicyParams, Probe};
use crate::rng::substream;
use crate::vocab::{TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub position: usize,
    pub span: String,
    pub token: String,
    pub p_student: f64,
    pub p_teacher: f64,
    pub p_teacher_flipped: f64,
    /// Whether the position lies at or after the block's insertion point.
    pub after_insertion: bool,
}

/// Probability of the emitted token at each action position of member
/// `focal`. Without a supervised position there is no block and the teacher
/// columns repeat the student's.
pub fn trace_tokens(
    policy: &Policy,
    params: &PolicyParams,
    vocab: &Vocab,
    group: &RolloutGroup,
    focal: usize,
    cfg: &TrainConfig,
) -> Result<Vec<TraceRow>> {
    let t = &group.trajectories[focal];
    let q = t.question_tokens.len();
    let student_tokens = t.full_tokens();
    let markers = vocab.markers();
    let supervised = cfg.scope.positions(t);

    let probs_at = |tokens: &[TokenId], index: &dyn Fn(usize) -> usize| -> Vec<f64> {
        let pos: Vec<usize> = t.action_positions.iter().map(|&p| index(p)).collect();
        policy
            .forward(
                params,
                Probe {
                    tokens,
                    question_len: q,
                    positions: &pos,
                },
                cfg.temperature,
            )
            .iter()
            .zip(&pos)
            .map(|(o, &i)| o.probs[tokens[i] as usize])
            .collect()
    };
    let student = probs_at(&student_tokens, &|p| q + p);

    let insertion = if t.malformed {
        None
    } else {
        insertion_point(t, supervised)
    };
    let (real, flipped) = match insertion {
        None => (student.clone(), student.clone()),
        Some(ins) => {
            let real_cfg = cfg.hindsight_config();
            let mut ff = cfg.hindsight;
            if !ff.docs_only {
                ff.no_labels = false;
                ff.shuffled_labels = false;
                ff.flipped_labels = true;
            }
            let flip_cfg = HindsightConfig { flags: ff, ..real_cfg };
            let key = [group.question.id as u64, focal as u64];
            let mut cols = Vec::with_capacity(2);
            for hc in [real_cfg, flip_cfg] {
                let mut rng = substream(cfg.seed, "trace-labels", &key);
                let block = build_block(group, focal, &hc, ins, &markers, &mut rng)?;
                let ctx =
                    assemble_teacher_context(&t.question_tokens, &t.body_tokens, &block.rendered, ins, supervised)?;
                let off = ctx.offset;
                cols.push(probs_at(&ctx.tokens, &|p| if p < ins { q + p } else { q + p + off }));
            }
            let flipped = cols.pop().expect("two columns");
            (cols.pop().expect("two columns"), flipped)
        }
    };

    Ok(t.action_positions
        .iter()
        .enumerate()
        .map(|(k, &p)| TraceRow {
            position: p,
            span: t
                .spans
                .iter()
                .find(|s| s.open_index() <= p && p <= s.close_index())
                .map_or("none", |s| s.kind.name())
                .to_string(),
            token: vocab.token(t.body_tokens[p]).to_string(),
            p_student: student[k],
            p_teacher: real[k],
            p_teacher_flipped: flipped[k],
            after_insertion: insertion.is_some_and(|i| p >= i),
        })
        .collect())
}

pub fn write_trace_csv(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
