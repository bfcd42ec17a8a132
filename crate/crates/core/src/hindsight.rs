//! Teacher-side hindsight: future masking, the group block, and the aligned
//! teacher context.
//!
//! Block layout (token level):
//!
//! ```text
//! <hindsight>
//!   <sibling> SKELETON <outcome> LABEL      one line per kept sibling
//!   SKELETON                                focal future
//!   <outcome> LABEL                         focal outcome
//! </hindsight>
//! ```
//!
//! A skeleton is the search spans of a trajectory joined by `->`, or the
//! single `<noquery>` token when there are none.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{SpanKind, Trajectory};
use crate::grpo::RolloutGroup;
use crate::scoring::{outcome_label, Outcome};
use crate::vocab::{Markers, Reserved, TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSkeleton {
    pub queries: Vec<Vec<TokenId>>,
    pub source_index: usize,
}

impl SearchSkeleton {
    pub fn render(&self, m: &Markers) -> Vec<TokenId> {
        if self.queries.is_empty() {
            return vec![m.get(Reserved::NoQuery)];
        }
        let mut out = Vec::new();
        for (i, q) in self.queries.iter().enumerate() {
            if i > 0 {
                out.push(m.get(Reserved::HbArrow));
            }
            out.push(m.open_tag(SpanKind::Search));
            out.extend_from_slice(q);
            out.push(m.close_tag(SpanKind::Search));
        }
        out
    }
}

/// Search spans of `t` in order; everything else is dropped.
pub fn future_mask(t: &Trajectory, source_index: usize) -> SearchSkeleton {
    future_mask_from(t, source_index, 0)
}

/// Search spans whose opening tag is at or after body index `from`.
pub fn future_mask_from(t: &Trajectory, source_index: usize, from: usize) -> SearchSkeleton {
    SearchSkeleton {
        queries: t
            .search_spans()
            .filter(|s| s.open_index() >= from)
            .map(|s| t.body_tokens[s.start..s.end].to_vec())
            .collect(),
        source_index,
    }
}

/// Hindsight construction switches. Each one toggles a single ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HindsightFlags {
    pub no_labels: bool,
    pub shuffled_labels: bool,
    pub correct_only: bool,
    pub single_rollout: bool,
    pub leave_one_out: bool,
    pub no_masking: bool,
    pub docs_only: bool,
    pub flipped_labels: bool,
}

impl HindsightFlags {
    pub fn validate(&self) -> Result<()> {
        let conflicts = [
            (self.no_labels, self.shuffled_labels, "no_labels", "shuffled_labels"),
            (self.no_labels, self.flipped_labels, "no_labels", "flipped_labels"),
            (
                self.shuffled_labels,
                self.flipped_labels,
                "shuffled_labels",
                "flipped_labels",
            ),
            (
                self.single_rollout,
                self.leave_one_out,
                "single_rollout",
                "leave_one_out",
            ),
            (self.single_rollout, self.correct_only, "single_rollout", "correct_only"),
        ];
        for (a, b, na, nb) in conflicts {
            if a && b {
                return Err(Error::Hindsight(format!("`{na}` and `{nb}` cannot be combined")));
            }
        }
        let others = self.no_labels
            || self.shuffled_labels
            || self.correct_only
            || self.single_rollout
            || self.leave_one_out
            || self.no_masking
            || self.flipped_labels;
        if self.docs_only && others {
            return Err(Error::Hindsight(
                "`docs_only` replaces the whole block and excludes other flags".into(),
            ));
        }
        Ok(())
    }

    /// Flags for a named ablation row.
    pub fn from_variant(name: &str) -> Result<Self> {
        let mut f = Self::default();
        match name {
            "full" => {}
            "no_labels" => f.no_labels = true,
            "shuffled_labels" => f.shuffled_labels = true,
            "correct_only" => f.correct_only = true,
            "single_rollout" => f.single_rollout = true,
            "leave_one_out" => f.leave_one_out = true,
            "no_masking" => f.no_masking = true,
            "docs_only" => f.docs_only = true,
            "flipped_labels" => f.flipped_labels = true,
            other => return Err(Error::Hindsight(format!("unknown hindsight variant `{other}`"))),
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HindsightConfig {
    pub rho: f64,
    pub budget: usize,
    pub flags: HindsightFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub skeleton: SearchSkeleton,
    pub outcome: Outcome,
    /// Label as rendered; `None` when labels are omitted.
    pub shown: Option<Outcome>,
    /// Tokens standing in for the skeleton (the full body under no-masking).
    pub content: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HindsightBlock {
    pub entries: Vec<BlockEntry>,
    /// Absent under leave-one-out and docs-only.
    pub focal_future: Option<SearchSkeleton>,
    pub focal_content: Vec<TokenId>,
    pub focal_outcome: Outcome,
    pub focal_shown: Option<Outcome>,
    /// Documents shown by the docs-only variant.
    pub docs: Option<Vec<TokenId>>,
    pub rendered: Vec<TokenId>,
}

fn label_token(m: &Markers, o: Outcome) -> TokenId {
    match o {
        Outcome::Correct => m.get(Reserved::LblCorrect),
        Outcome::Incorrect => m.get(Reserved::LblIncorrect),
    }
}

fn entry_tokens(m: &Markers, e: &BlockEntry) -> Vec<TokenId> {
    let mut out = vec![m.get(Reserved::HbSibling)];
    out.extend_from_slice(&e.content);
    if let Some(l) = e.shown {
        out.push(m.get(Reserved::HbOutcome));
        out.push(label_token(m, l));
    }
    out
}

fn focal_tokens(m: &Markers, content: Option<&[TokenId]>, shown: Option<Outcome>) -> Vec<TokenId> {
    let mut out = content.map(<[TokenId]>::to_vec).unwrap_or_default();
    if let Some(l) = shown {
        out.push(m.get(Reserved::HbOutcome));
        out.push(label_token(m, l));
    }
    out
}

impl HindsightBlock {
    fn render(&self, m: &Markers) -> Vec<TokenId> {
        let mut out = vec![m.get(Reserved::HbHeader)];
        if let Some(docs) = &self.docs {
            out.push(m.open_tag(SpanKind::Documents));
            out.extend_from_slice(docs);
            out.push(m.close_tag(SpanKind::Documents));
        } else {
            for e in &self.entries {
                out.extend(entry_tokens(m, e));
            }
            let content = self.focal_future.as_ref().map(|_| self.focal_content.as_slice());
            out.extend(focal_tokens(m, content, self.focal_shown));
        }
        out.push(m.get(Reserved::HbEnd));
        out
    }

    pub fn len(&self) -> usize {
        self.rendered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rendered.is_empty()
    }

    /// Human-readable rendering in the familiar teacher-input layout.
    pub fn to_text(&self, vocab: &Vocab) -> String {
        let m = vocab.markers();
        let mut lines = vec![String::new(), "[Trajectory Hindsight]:".to_string()];
        let label = |o: Option<Outcome>| o.map(|o| format!("[Outcome]: {}", o.as_str()));
        if let Some(docs) = &self.docs {
            lines.push(span_text(vocab, &m, &{
                let mut t = vec![m.open_tag(SpanKind::Documents)];
                t.extend_from_slice(docs);
                t.push(m.close_tag(SpanKind::Documents));
                t
            }));
        } else {
            for e in &self.entries {
                let mut line = format!("[Sibling Rollout]: {}", span_text(vocab, &m, &e.content));
                if let Some(l) = label(e.shown) {
                    line.push(' ');
                    line.push_str(&l);
                }
                lines.push(line);
            }
            if self.focal_future.is_some() {
                lines.push(span_text(vocab, &m, &self.focal_content));
            }
            if let Some(l) = label(self.focal_shown) {
                lines.push(l);
            }
        }
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}

/// Words separated by spaces, with span tags hugging their contents.
fn span_text(vocab: &Vocab, m: &Markers, tokens: &[TokenId]) -> String {
    let mut out = String::new();
    let mut glue = true;
    for &t in tokens {
        let is_open = m.opens(t).is_some();
        let is_close = m.closes(t).is_some();
        let word = if t == m.get(Reserved::NoQuery) {
            "<noquery>"
        } else {
            vocab.token(t)
        };
        if !glue && !is_close {
            out.push(' ');
        }
        out.push_str(word);
        glue = is_open;
    }
    out
}

/// Body index before which the hindsight block goes: the opening tag of the
/// span holding the first supervised position, or that position itself.
pub fn insertion_point(t: &Trajectory, supervised: &[usize]) -> Option<usize> {
    let first = *supervised.iter().min()?;
    Some(
        t.spans
            .iter()
            .find(|s| s.contains(first))
            .map(|s| s.open_index())
            .unwrap_or(first),
    )
}

/// Builds the block for member `focal` of `group`, to be inserted at body
/// index `insertion` of the focal trajectory.
pub fn build_block(
    group: &RolloutGroup,
    focal: usize,
    cfg: &HindsightConfig,
    insertion: usize,
    markers: &Markers,
    rng: &mut impl rand::Rng,
) -> Result<HindsightBlock> {
    let flags = cfg.flags;
    flags.validate()?;
    if focal >= group.len() {
        return Err(Error::Hindsight(format!(
            "focal index {focal} out of range for group of {}",
            group.len()
        )));
    }
    if !(0.0..=1.0).contains(&cfg.rho) {
        return Err(Error::Hindsight(format!("rho {} outside [0, 1]", cfg.rho)));
    }
    let focal_t = &group.trajectories[focal];
    let focal_outcome = outcome_label(group.rewards[focal], cfg.rho);

    if flags.docs_only {
        let docs = focal_t
            .spans
            .iter()
            .rev()
            .find(|s| s.kind == SpanKind::Documents && s.close_index() < insertion)
            .map(|s| focal_t.body_tokens[s.start..s.end].to_vec())
            .unwrap_or_default();
        let mut block = HindsightBlock {
            entries: Vec::new(),
            focal_future: None,
            focal_content: Vec::new(),
            focal_outcome,
            focal_shown: None,
            docs: Some(docs),
            rendered: Vec::new(),
        };
        block.rendered = block.render(markers);
        if block.rendered.len() > cfg.budget {
            let keep = cfg.budget.saturating_sub(4);
            if let Some(d) = block.docs.as_mut() {
                d.truncate(keep);
            }
            block.rendered = block.render(markers);
            if block.rendered.len() > cfg.budget {
                return Err(Error::Hindsight(format!(
                    "budget {} too small for any block",
                    cfg.budget
                )));
            }
        }
        return Ok(block);
    }

    let content_of = |t: &Trajectory, sk: &SearchSkeleton| -> Vec<TokenId> {
        if flags.no_masking {
            t.body_tokens.clone()
        } else {
            sk.render(markers)
        }
    };

    let mut entries: Vec<BlockEntry> = Vec::new();
    if !flags.single_rollout {
        for (j, t) in group.trajectories.iter().enumerate() {
            if j == focal {
                continue;
            }
            let outcome = outcome_label(group.rewards[j], cfg.rho);
            if flags.correct_only && outcome != Outcome::Correct {
                continue;
            }
            let skeleton = future_mask(t, j);
            let content = content_of(t, &skeleton);
            if entries.iter().any(|e| e.content == content && e.outcome == outcome) {
                continue;
            }
            entries.push(BlockEntry {
                skeleton,
                outcome,
                shown: Some(outcome),
                content,
            });
        }
    }

    let mut show = |o: Outcome| -> Option<Outcome> {
        if flags.no_labels {
            None
        } else if flags.flipped_labels {
            Some(o.flipped())
        } else if flags.shuffled_labels {
            Some(if rng.gen_bool(0.5) {
                Outcome::Correct
            } else {
                Outcome::Incorrect
            })
        } else {
            Some(o)
        }
    };
    for e in &mut entries {
        e.shown = show(e.outcome);
    }
    let focal_shown = show(focal_outcome);

    let (focal_future, focal_content) = if flags.leave_one_out {
        (None, Vec::new())
    } else {
        let sk = future_mask_from(focal_t, focal, insertion);
        let content = if flags.no_masking {
            focal_t.body_tokens[insertion.min(focal_t.body_tokens.len())..].to_vec()
        } else {
            sk.render(markers)
        };
        (Some(sk), content)
    };

    let mut block = HindsightBlock {
        entries,
        focal_future,
        focal_content,
        focal_outcome,
        focal_shown,
        docs: None,
        rendered: Vec::new(),
    };
    block.rendered = block.render(markers);

    while block.rendered.len() > cfg.budget && !block.entries.is_empty() {
        block.entries.pop();
        block.rendered = block.render(markers);
    }
    if block.rendered.len() > cfg.budget {
        // The focal blocks alone overflow: keep the earliest focal queries.
        if let Some(mut sk) = block.focal_future.clone() {
            while block.rendered.len() > cfg.budget && !block.focal_content.is_empty() {
                if flags.no_masking {
                    let excess = block.rendered.len() - cfg.budget;
                    let keep = block.focal_content.len().saturating_sub(excess);
                    block.focal_content.truncate(keep);
                } else if sk.queries.pop().is_some() {
                    block.focal_content = sk.render(markers);
                } else {
                    break;
                }
                block.focal_future = Some(sk.clone());
                block.rendered = block.render(markers);
            }
        }
        if block.rendered.len() > cfg.budget {
            return Err(Error::Hindsight(format!(
                "budget {} cannot hold the focal blocks ({} tokens)",
                cfg.budget,
                block.rendered.len()
            )));
        }
    }
    Ok(block)
}

/// Teacher input: question, body prefix, block, then the rest of the body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherContext {
    pub tokens: Vec<TokenId>,
    pub question_len: usize,
    /// Body index where the block was inserted.
    pub insertion: usize,
    /// Length of the inserted block.
    pub offset: usize,
}

impl TeacherContext {
    /// Index into `tokens` of body position `p` (which must be `>= insertion`).
    pub fn teacher_index(&self, p: usize) -> usize {
        debug_assert!(p >= self.insertion);
        self.question_len + p + self.offset
    }

    /// Teacher indices for body positions, in order.
    pub fn teacher_positions(&self, body_positions: &[usize]) -> Vec<usize> {
        body_positions.iter().map(|&p| self.teacher_index(p)).collect()
    }
}

pub fn assemble_teacher_context(
    question_tokens: &[TokenId],
    body: &[TokenId],
    block: &[TokenId],
    insertion: usize,
    supervised: &[usize],
) -> Result<TeacherContext> {
    if insertion > body.len() {
        return Err(Error::Hindsight(format!(
            "insertion point {insertion} beyond body of length {}",
            body.len()
        )));
    }
    if let Some(&p) = supervised.iter().find(|&&p| p < insertion || p >= body.len()) {
        return Err(Error::Hindsight(format!(
            "supervised position {p} lies outside [{insertion}, {})",
            body.len()
        )));
    }
    let mut tokens = Vec::with_capacity(question_tokens.len() + body.len() + block.len());
    tokens.extend_from_slice(question_tokens);
    tokens.extend_from_slice(&body[..insertion]);
    tokens.extend_from_slice(block);
    tokens.extend_from_slice(&body[insertion..]);
    let ctx = TeacherContext {
        tokens,
        question_len: question_tokens.len(),
        insertion,
        offset: block.len(),
    };
    for &p in supervised {
        if ctx.tokens[ctx.teacher_index(p)] != body[p] {
            return Err(Error::Hindsight(format!("suffix identity broken at body position {p}")));
        }
    }
    Ok(ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Question;
    use crate::format::parse_trajectory;
    use crate::rng::substream;

    fn vocab() -> Vocab {
        Vocab::with_default_reserved(["a", "b", "c", "d", "x", "filler"]).unwrap()
    }

    fn group(v: &Vocab, bodies: &[&str], rewards: &[f64]) -> RolloutGroup {
        let trajectories = bodies
            .iter()
            .map(|b| parse_trajectory(&v.encode(b).unwrap(), v).with_question(v.encode("x").unwrap()))
            .collect();
        RolloutGroup {
            question: Question {
                id: 0,
                hops: 1,
                prompt_tokens: v.encode("x").unwrap(),
                gold_answer: v.encode("d").unwrap(),
                gold_path: vec![],
            },
            trajectories,
            rewards: rewards.to_vec(),
            advantages: crate::grpo::compute_advantages(rewards).unwrap(),
        }
    }

    fn cfg(flags: HindsightFlags) -> HindsightConfig {
        HindsightConfig {
            rho: 0.0,
            budget: 1024,
            flags,
        }
    }

    #[test]
    fn mask_keeps_queries_in_order() {
        let v = vocab();
        let t = parse_trajectory(
            &v.encode("<think> filler </think> <search> a </search> <documents> filler </documents> <search> b c </search> <answer> d </answer>")
                .unwrap(),
            &v,
        );
        let sk = future_mask(&t, 3);
        assert_eq!(sk.queries, vec![v.encode("a").unwrap(), v.encode("b c").unwrap()]);
        assert_eq!(sk.source_index, 3);
        let empty = future_mask(&parse_trajectory(&v.encode("<answer> d </answer>").unwrap(), &v), 0);
        assert_eq!(empty.render(&v.markers()), vec![v.id(Reserved::NoQuery)]);
    }

    #[test]
    fn dedup_collapses_identical_siblings() {
        let v = vocab();
        let g = group(
            &v,
            &[
                "<search> a </search> <answer> d </answer>",
                "<search> b </search> <answer> d </answer>",
                "<search> b </search> <answer> d </answer>",
                "<search> c </search> <answer> x </answer>",
                "<search> b </search> <answer> x </answer>",
            ],
            &[1.0, 1.0, 1.0, 0.0, 0.0],
        );
        let b = build_block(
            &g,
            0,
            &cfg(HindsightFlags::default()),
            0,
            &v.markers(),
            &mut substream(0, "t", &[]),
        )
        .unwrap();
        assert_eq!(b.entries.len(), 3);
        assert_eq!(
            b.entries.iter().map(|e| e.skeleton.source_index).collect::<Vec<_>>(),
            vec![1, 3, 4]
        );
        let again = build_block(
            &g,
            0,
            &cfg(HindsightFlags::default()),
            0,
            &v.markers(),
            &mut substream(0, "t", &[]),
        )
        .unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn budget_drops_trailing_entries_only() {
        let v = vocab();
        let g = group(
            &v,
            &[
                "<search> a </search> <answer> d </answer>",
                "<search> b </search> <answer> d </answer>",
                "<search> c </search> <answer> x </answer>",
                "<search> a b </search> <answer> x </answer>",
            ],
            &[1.0, 1.0, 0.0, 0.0],
        );
        let full = build_block(
            &g,
            0,
            &cfg(HindsightFlags::default()),
            0,
            &v.markers(),
            &mut substream(0, "t", &[]),
        )
        .unwrap();
        assert_eq!(full.entries.len(), 3);
        let mut c = cfg(HindsightFlags::default());
        c.budget = full.len() - 1;
        let cut = build_block(&g, 0, &c, 0, &v.markers(), &mut substream(0, "t", &[])).unwrap();
        assert_eq!(cut.entries.len(), 2);
        assert!(cut.len() <= c.budget);
        assert_eq!(cut.entries[..], full.entries[..2]);
        assert_eq!(cut.focal_future, full.focal_future);
        assert_eq!(cut.focal_shown, full.focal_shown);
        c.budget = 3;
        assert!(build_block(&g, 0, &c, 0, &v.markers(), &mut substream(0, "t", &[])).is_err());
    }

    #[test]
    fn variants_shape_the_block() {
        let v = vocab();
        let m = v.markers();
        let g = group(
            &v,
            &[
                "<search> a </search> <documents> filler </documents> <answer> d </answer>",
                "<search> b </search> <answer> d </answer>",
                "<search> c </search> <answer> x </answer>",
            ],
            &[1.0, 1.0, 0.0],
        );
        let mut rng = substream(0, "t", &[]);
        let build = |f: HindsightFlags, rng: &mut crate::rng::Rng| build_block(&g, 0, &cfg(f), 0, &m, rng).unwrap();

        let b = build(HindsightFlags::from_variant("no_labels").unwrap(), &mut rng);
        assert!(!b.rendered.contains(&v.id(Reserved::HbOutcome)));

        let b = build(HindsightFlags::from_variant("correct_only").unwrap(), &mut rng);
        assert_eq!(b.entries.len(), 1);
        assert_eq!(b.entries[0].outcome, Outcome::Correct);

        let b = build(HindsightFlags::from_variant("single_rollout").unwrap(), &mut rng);
        assert!(b.entries.is_empty() && b.focal_future.is_some());

        let b = build(HindsightFlags::from_variant("leave_one_out").unwrap(), &mut rng);
        assert_eq!(b.entries.len(), 2);
        assert!(b.focal_future.is_none());
        assert_eq!(b.focal_shown, Some(Outcome::Correct));

        let b = build(HindsightFlags::from_variant("flipped_labels").unwrap(), &mut rng);
        assert_eq!(b.entries[1].shown, Some(Outcome::Correct));
        assert_eq!(b.focal_shown, Some(Outcome::Incorrect));

        let b = build(HindsightFlags::from_variant("no_masking").unwrap(), &mut rng);
        assert!(b.rendered.contains(&v.lookup("filler").unwrap()));
        let b = build(HindsightFlags::default(), &mut rng);
        assert!(!b.rendered.contains(&v.lookup("filler").unwrap()));

        let b = build(HindsightFlags::from_variant("docs_only").unwrap(), &mut rng);
        assert_eq!(b.docs, Some(vec![]));
        assert_eq!(b.rendered.len(), 4);

        let docs_late = build_block(
            &g,
            0,
            &cfg(HindsightFlags::from_variant("docs_only").unwrap()),
            7,
            &m,
            &mut rng,
        )
        .unwrap();
        assert_eq!(docs_late.docs, Some(v.encode("filler").unwrap()));

        let labels: Vec<_> = (0..64)
            .map(|i| {
                build_block(
                    &g,
                    0,
                    &cfg(HindsightFlags::from_variant("shuffled_labels").unwrap()),
                    0,
                    &m,
                    &mut substream(i, "t", &[]),
                )
                .unwrap()
                .focal_shown
            })
            .collect();
        assert!(labels.contains(&Some(Outcome::Correct)) && labels.contains(&Some(Outcome::Incorrect)));
    }

    #[test]
    fn conflicting_flags_are_rejected() {
        let f = HindsightFlags {
            no_labels: true,
            flipped_labels: true,
            ..Default::default()
        };
        assert!(f.validate().is_err());
        let f = HindsightFlags {
            docs_only: true,
            no_masking: true,
            ..Default::default()
        };
        assert!(f.validate().is_err());
        assert!(HindsightFlags::from_variant("bogus").is_err());
    }

    #[test]
    fn teacher_context_alignment() {
        let v = vocab();
        let body = v
            .encode("<think> filler </think> <search> a b </search> <documents> c </documents> <answer> d </answer>")
            .unwrap();
        let t = parse_trajectory(&body, &v);
        let ins = insertion_point(&t, &t.query_positions).unwrap();
        assert_eq!(ins, 3);
        let block = v.encode("<hindsight> <noquery> </hindsight>").unwrap();
        let q = v.encode("x").unwrap();
        let ctx = assemble_teacher_context(&q, &body, &block, ins, &t.query_positions).unwrap();
        assert_eq!(ctx.offset, 3);
        for &p in &t.query_positions {
            assert_eq!(ctx.tokens[ctx.teacher_index(p)], body[p]);
            assert_eq!(ctx.tokens[ctx.teacher_index(p) - 1], body[p - 1]);
        }
        assert_eq!(&ctx.tokens[..1 + ins], &[&q[..], &body[..ins]].concat()[..]);
        assert!(assemble_teacher_context(&q, &body, &block, ins, &[1]).is_err());
        assert_eq!(insertion_point(&t, &t.action_positions), Some(0));
        assert_eq!(insertion_point(&t, &[]), None);
    }
}
