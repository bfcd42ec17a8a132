//! Left-to-right structural annotation of a context.
//!
//! Every prediction point `t` (predicting `x[t]` from `x[..t]`) gets a discrete
//! state, and every context token `x[j]`, `j < t`, gets a discrete role. Roles
//! may depend on `t`: document recency is relative to `t`, and a hindsight
//! outcome label only colours the queries of its entry once the label token
//! itself lies before `t`.

use crate::format::SpanKind;
use crate::scoring::Outcome;
use crate::vocab::{Markers, Reserved, TokenId};

pub const N_KINDS: usize = 19;
pub const N_SEARCH_BUCKETS: usize = 4;
pub const N_QUESTION_BUCKETS: usize = 4;
pub const N_STATES: usize = N_KINDS * N_SEARCH_BUCKETS * N_QUESTION_BUCKETS;

const ROLE_QUESTION: usize = 0; // 5 offsets
const ROLE_STRAY: usize = 5;
const ROLE_TAG: usize = 6;
const ROLE_THINK: usize = 7;
const ROLE_QUERY: usize = 8; // 3 rounds x 4 offsets
const ROLE_DOC: usize = 20; // 2 recency x 3 facts x 3 slots x 2 x 2
const ROLE_NOSEARCH: usize = 92;
const ROLE_ANSWER: usize = 93;
const ROLE_HB_MARKUP: usize = 94;
const ROLE_HB_QUERY: usize = 95; // 3 labels x 2 focal x 3 rounds x 4 offsets
const ROLE_HB_CONTENT: usize = 167; // 3 kinds x 3 labels
pub const N_ROLES: usize = 176;

/// Where the next token will go.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ctx {
    Start,
    AfterThink,
    AfterDocs,
    AfterAnswer,
    Other,
    Think(usize),
    Search(usize),
    Answer(usize),
    Docs,
    Hindsight,
}

impl Ctx {
    fn index(self) -> usize {
        match self {
            Ctx::Start => 0,
            Ctx::AfterThink => 1,
            Ctx::AfterDocs => 2,
            Ctx::AfterAnswer => 3,
            Ctx::Other => 4,
            Ctx::Think(o) => 5 + o.min(3),
            Ctx::Search(o) => 9 + o.min(4),
            Ctx::Answer(o) => 14 + o.min(2),
            Ctx::Docs => 17,
            Ctx::Hindsight => 18,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum TokInfo {
    Question(usize),
    Stray,
    Tag,
    Think,
    Query {
        round: usize,
        offset: usize,
    },
    Doc {
        span: usize,
        fact: usize,
        slot: usize,
        /// Index of this fact's subject / relation token and whether it
        /// occurs in the query that triggered the retrieval.
        subj: (usize, bool),
        rel: (usize, bool),
    },
    NoSearch,
    Answer,
    HbMarkup,
    HbQuery {
        entry: usize,
        round: usize,
        offset: usize,
    },
    HbContent {
        entry: Option<usize>,
        kind: usize,
    },
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    focal: bool,
    label: Option<(usize, Outcome)>,
}

#[derive(Debug, Clone, Copy)]
struct BodyState {
    ctx: Ctx,
    open: Option<SpanKind>,
    searches: usize,
}

#[derive(Debug, Clone, Default)]
struct HbState {
    entry: Option<usize>,
    open: Option<(SpanKind, usize)>,
    round: usize,
    pending_label: bool,
}

/// States and roles for one context.
#[derive(Debug, Clone)]
pub struct Annotation {
    states: Vec<usize>,
    info: Vec<TokInfo>,
    entries: Vec<Entry>,
    docs_starts: Vec<usize>,
}

impl Annotation {
    /// `question_len` tokens at the front form the question region;
    /// `question_bucket_len` is the original question length (it differs
    /// from `question_len` when the window cut part of the question).
    pub fn new(tokens: &[TokenId], markers: &Markers, question_len: usize, question_bucket_len: usize) -> Self {
        let qb = question_bucket_len.clamp(1, N_QUESTION_BUCKETS) - 1;
        let state_of = |b: &BodyState, ctx: Ctx| {
            (ctx.index() * N_SEARCH_BUCKETS + b.searches.min(N_SEARCH_BUCKETS - 1)) * N_QUESTION_BUCKETS + qb
        };

        let mut states = Vec::with_capacity(tokens.len() + 1);
        let mut info = Vec::with_capacity(tokens.len());
        let mut entries: Vec<Entry> = Vec::new();
        let mut docs_starts = Vec::new();

        let mut body = BodyState {
            ctx: Ctx::Start,
            open: None,
            searches: 0,
        };
        let mut hb: Option<(BodyState, HbState)> = None;
        let mut offset = 0usize;
        let mut query: Vec<TokenId> = Vec::new();
        let mut last_query: Vec<TokenId> = Vec::new();
        let mut docs_content_start = 0usize;

        let nosearch = markers.get(Reserved::NoSearch);
        let noquery = markers.get(Reserved::NoQuery);
        let header = markers.get(Reserved::HbHeader);
        let hb_end = markers.get(Reserved::HbEnd);
        let hb_sibling = markers.get(Reserved::HbSibling);
        let hb_outcome = markers.get(Reserved::HbOutcome);
        let correct = markers.get(Reserved::LblCorrect);
        let incorrect = markers.get(Reserved::LblIncorrect);
        let eos = markers.get(Reserved::Eos);

        for (j, &tok) in tokens.iter().enumerate() {
            states.push(if hb.is_some() {
                state_of(&body, Ctx::Hindsight)
            } else {
                state_of(&body, body.ctx)
            });

            if j < question_len {
                info.push(TokInfo::Question(j.min(4)));
                continue;
            }

            if let Some((saved, h)) = hb.as_mut() {
                let entry_of = |h: &mut HbState, entries: &mut Vec<Entry>| -> usize {
                    *h.entry.get_or_insert_with(|| {
                        entries.push(Entry {
                            focal: true,
                            label: None,
                        });
                        h.round = 0;
                        entries.len() - 1
                    })
                };
                let ti = if tok == hb_end {
                    body = *saved;
                    hb = None;
                    TokInfo::HbMarkup
                } else if tok == header || tok == hb_outcome || tok == markers.get(Reserved::HbArrow) {
                    if tok == hb_outcome {
                        h.pending_label = true;
                    }
                    TokInfo::HbMarkup
                } else if tok == hb_sibling {
                    entries.push(Entry {
                        focal: false,
                        label: None,
                    });
                    h.entry = Some(entries.len() - 1);
                    h.round = 0;
                    h.open = None;
                    TokInfo::HbMarkup
                } else if h.pending_label && (tok == correct || tok == incorrect) {
                    let outcome = if tok == correct {
                        Outcome::Correct
                    } else {
                        Outcome::Incorrect
                    };
                    if let Some(e) = h.entry {
                        entries[e].label = Some((j, outcome));
                    }
                    h.entry = None;
                    h.open = None;
                    h.pending_label = false;
                    TokInfo::HbMarkup
                } else if tok == noquery {
                    entry_of(h, &mut entries);
                    TokInfo::HbMarkup
                } else if let Some(kind) = markers.opens(tok) {
                    entry_of(h, &mut entries);
                    h.open = Some((kind, 0));
                    TokInfo::HbMarkup
                } else if let Some(kind) = markers.closes(tok) {
                    if kind == SpanKind::Search {
                        h.round += 1;
                    }
                    h.open = None;
                    TokInfo::HbMarkup
                } else {
                    let e = entry_of(h, &mut entries);
                    match h.open.as_mut() {
                        Some((SpanKind::Search, o)) => {
                            let ti = TokInfo::HbQuery {
                                entry: e,
                                round: h.round,
                                offset: *o,
                            };
                            *o += 1;
                            ti
                        }
                        Some((SpanKind::Think, _)) => TokInfo::HbContent {
                            entry: Some(e),
                            kind: 0,
                        },
                        Some((SpanKind::Documents, _)) => TokInfo::HbContent {
                            entry: Some(e),
                            kind: 1,
                        },
                        _ => TokInfo::HbContent {
                            entry: Some(e),
                            kind: 2,
                        },
                    }
                };
                info.push(ti);
                continue;
            }

            if tok == header {
                hb = Some((body, HbState::default()));
                info.push(TokInfo::HbMarkup);
                continue;
            }

            let ti = match body.open {
                None => {
                    if let Some(kind) = markers.opens(tok) {
                        body.open = Some(kind);
                        offset = 0;
                        body.ctx = match kind {
                            SpanKind::Think => Ctx::Think(0),
                            SpanKind::Search => {
                                query.clear();
                                Ctx::Search(0)
                            }
                            SpanKind::Documents => {
                                docs_starts.push(j);
                                docs_content_start = j + 1;
                                Ctx::Docs
                            }
                            SpanKind::Answer => Ctx::Answer(0),
                        };
                        TokInfo::Tag
                    } else if markers.closes(tok).is_some() || tok == eos {
                        body.ctx = Ctx::Other;
                        TokInfo::Tag
                    } else if tok == nosearch {
                        body.ctx = Ctx::Other;
                        TokInfo::NoSearch
                    } else {
                        body.ctx = Ctx::Other;
                        TokInfo::Stray
                    }
                }
                Some(open) => {
                    if markers.closes(tok) == Some(open) {
                        body.open = None;
                        body.ctx = match open {
                            SpanKind::Think => Ctx::AfterThink,
                            SpanKind::Search => {
                                body.searches += 1;
                                last_query = std::mem::take(&mut query);
                                Ctx::Other
                            }
                            SpanKind::Documents => Ctx::AfterDocs,
                            SpanKind::Answer => Ctx::AfterAnswer,
                        };
                        TokInfo::Tag
                    } else if markers.is_tag(tok) || tok == eos {
                        TokInfo::Tag
                    } else {
                        let o = offset;
                        offset += 1;
                        match open {
                            SpanKind::Think => {
                                body.ctx = Ctx::Think(offset);
                                TokInfo::Think
                            }
                            SpanKind::Search => {
                                body.ctx = Ctx::Search(offset);
                                query.push(tok);
                                TokInfo::Query {
                                    round: body.searches,
                                    offset: o,
                                }
                            }
                            SpanKind::Answer => {
                                body.ctx = Ctx::Answer(offset);
                                TokInfo::Answer
                            }
                            SpanKind::Documents => {
                                if tok == nosearch {
                                    TokInfo::NoSearch
                                } else {
                                    let fact = o / 3;
                                    let base = docs_content_start + 3 * fact;
                                    let matches = |p: usize| tokens.get(p).is_some_and(|t| last_query.contains(t));
                                    TokInfo::Doc {
                                        span: docs_starts.len() - 1,
                                        fact,
                                        slot: o % 3,
                                        subj: (base, matches(base)),
                                        rel: (base + 1, matches(base + 1)),
                                    }
                                }
                            }
                        }
                    }
                }
            };
            info.push(ti);
        }
        states.push(if hb.is_some() {
            state_of(&body, Ctx::Hindsight)
        } else {
            state_of(&body, body.ctx)
        });

        Self {
            states,
            info,
            entries,
            docs_starts,
        }
    }

    pub fn len(&self) -> usize {
        self.info.len()
    }

    pub fn is_empty(&self) -> bool {
        self.info.is_empty()
    }

    /// State for predicting the token at index `t` (`t <= len`).
    pub fn state(&self, t: usize) -> usize {
        self.states[t]
    }

    /// Role of context token `j` as seen from prediction point `t > j`.
    pub fn role(&self, j: usize, t: usize) -> usize {
        debug_assert!(j < t);
        match self.info[j] {
            TokInfo::Question(o) => ROLE_QUESTION + o,
            TokInfo::Stray => ROLE_STRAY,
            TokInfo::Tag => ROLE_TAG,
            TokInfo::Think => ROLE_THINK,
            TokInfo::Query { round, offset } => ROLE_QUERY + round.min(2) * 4 + offset.min(3),
            TokInfo::Doc {
                span,
                fact,
                slot,
                subj,
                rel,
            } => {
                let latest = self.docs_starts.partition_point(|&s| s < t).saturating_sub(1);
                let older = usize::from(span != latest);
                let s = usize::from(subj.1 && subj.0 < t);
                let r = usize::from(rel.1 && rel.0 < t);
                ROLE_DOC + (((older * 3 + fact.min(2)) * 3 + slot) * 2 + s) * 2 + r
            }
            TokInfo::NoSearch => ROLE_NOSEARCH,
            TokInfo::Answer => ROLE_ANSWER,
            TokInfo::HbMarkup => ROLE_HB_MARKUP,
            TokInfo::HbQuery { entry, round, offset } => {
                let e = self.entries[entry];
                ROLE_HB_QUERY
                    + ((self.label_index(e.label, t) * 2 + usize::from(e.focal)) * 3 + round.min(2)) * 4
                    + offset.min(3)
            }
            TokInfo::HbContent { entry, kind } => {
                let label = entry.and_then(|e| self.entries[e].label);
                ROLE_HB_CONTENT + kind * 3 + self.label_index(label, t)
            }
        }
    }

    fn label_index(&self, label: Option<(usize, Outcome)>, t: usize) -> usize {
        match label {
            Some((pos, Outcome::Correct)) if pos < t => 0,
            Some((pos, Outcome::Incorrect)) if pos < t => 1,
            _ => 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocab;

    fn vocab() -> Vocab {
        Vocab::with_default_reserved(["q0", "q1", "a", "b", "c", "d"]).unwrap()
    }

    fn ann(v: &Vocab, text: &str, qlen: usize) -> (Vec<TokenId>, Annotation) {
        let toks = v.encode(text).unwrap();
        let a = Annotation::new(&toks, &v.markers(), qlen, qlen);
        (toks, a)
    }

    #[test]
    fn ids_stay_in_range() {
        let v = vocab();
        let text = "q0 q1 <think> a b c d </think> <search> q0 a </search> <documents> a b c d b c \
                    </documents> <hindsight> <sibling> <search> a </search> -> \
                    <noquery> <outcome> Correct <search> b c d e </search> </hindsight> <answer> a";
        let text = text.replace(" e ", " a ");
        let (toks, a) = ann(&v, &text, 2);
        for t in 0..=toks.len() {
            assert!(a.state(t) < N_STATES);
            for j in 0..t {
                assert!(a.role(j, t) < N_ROLES);
            }
        }
    }

    #[test]
    fn query_and_doc_roles() {
        let v = vocab();
        let (toks, a) = ann(
            &v,
            "q0 q1 <search> a b </search> <documents> a b c b d a </documents> <search> c",
            2,
        );
        let n = toks.len();
        assert_eq!(a.role(0, n), ROLE_QUESTION);
        assert_eq!(a.role(3, n), ROLE_QUERY);
        assert_eq!(a.role(4, n), ROLE_QUERY + 1);
        // first fact (a b c): both subject and relation occur in the query
        assert_eq!(a.role(7, n), ROLE_DOC + 3);
        // second fact (b d a): subject matches, relation does not
        assert_eq!(a.role(10, n), ROLE_DOC + 3 * 4 + 2);
        // relation not yet visible from t = 10
        assert_eq!(a.role(10, 11), ROLE_DOC + 3 * 4 + 2);
        assert_eq!(a.role(7, 8), ROLE_DOC + 2);
        // state after `<search> c`: in a search at offset 1 with one search done
        let expected = (Ctx::Search(1).index() * 4 + 1) * 4 + 1;
        assert_eq!(a.state(n), expected);
    }

    #[test]
    fn hindsight_labels_are_causal() {
        let v = vocab();
        let (toks, a) = ann(
            &v,
            "q0 <hindsight> <sibling> <search> a </search> <outcome> Incorrect \
             <search> b </search> <outcome> Correct </hindsight> <search>",
            1,
        );
        let n = toks.len();
        let sib_query = 4;
        let label_pos = 7;
        let focal_query = 9;
        assert_eq!(a.role(sib_query, label_pos), ROLE_HB_QUERY + (2 * 2) * 12);
        assert_eq!(a.role(sib_query, label_pos + 1), ROLE_HB_QUERY + 2 * 12);
        assert_eq!(a.role(focal_query, n), ROLE_HB_QUERY + 12);
        // body state is restored after the block
        assert_eq!(a.state(n), (Ctx::Search(0).index() * 4) * 4);
        assert_eq!(a.state(5), (Ctx::Hindsight.index() * 4) * 4);
    }
}
