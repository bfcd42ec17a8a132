//! Typed-span trajectory grammar: parsing, serialization and position sets.
//!
//! A body is a flat token sequence in which the eight reserved tags delimit
//! `Think`, `Search`, `Documents` and `Answer` spans. Spans never nest. A
//! [`Span`] records the *interior* of a span (tags excluded), so a search span
//! `<search> a b </search>` starting at index 0 is `Search(1..3)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Markers, TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpanKind {
    Think,
    Search,
    Documents,
    Answer,
}

impl SpanKind {
    pub const ALL: [SpanKind; 4] = [SpanKind::Think, SpanKind::Search, SpanKind::Documents, SpanKind::Answer];

    pub fn name(self) -> &'static str {
        match self {
            SpanKind::Think => "think",
            SpanKind::Search => "search",
            SpanKind::Documents => "documents",
            SpanKind::Answer => "answer",
        }
    }
}

/// Interior of a span: `start` inclusive, `end` exclusive, both body indices.
///
/// Empty interiors (`start == end`) occur for `<search></search>` and for a
/// documents span with no retrieved facts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub kind: SpanKind,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn contains(&self, pos: usize) -> bool {
        (self.start..self.end).contains(&pos)
    }

    /// Index of the opening tag.
    pub fn open_index(&self) -> usize {
        self.start - 1
    }

    /// Index of the closing tag.
    pub fn close_index(&self) -> usize {
        self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question_tokens: Vec<TokenId>,
    pub body_tokens: Vec<TokenId>,
    pub spans: Vec<Span>,
    /// Sorted body indices generated by the policy.
    pub action_positions: Vec<usize>,
    /// Sorted body indices strictly inside search tags.
    pub query_positions: Vec<usize>,
    pub answer_text: Vec<TokenId>,
    pub reward: f64,
    pub malformed: bool,
}

impl Trajectory {
    pub fn search_spans(&self) -> impl Iterator<Item = &Span> {
        self.spans.iter().filter(|s| s.kind == SpanKind::Search)
    }

    pub fn num_searches(&self) -> usize {
        self.search_spans().count()
    }

    /// Kind of the span whose interior contains `pos`, if any.
    pub fn span_kind_at(&self, pos: usize) -> Option<SpanKind> {
        self.spans.iter().find(|s| s.contains(pos)).map(|s| s.kind)
    }

    pub fn with_question(mut self, question: Vec<TokenId>) -> Self {
        self.question_tokens = question;
        self
    }

    /// Question followed by body: the full student context.
    pub fn full_tokens(&self) -> Vec<TokenId> {
        let mut out = self.question_tokens.clone();
        out.extend_from_slice(&self.body_tokens);
        out
    }
}

/// Outcome of feeding one token to a [`SpanTracker`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackEvent {
    /// Ordinary token, inside or outside a span.
    Content,
    Opened(SpanKind),
    Closed(Span),
    /// Improper nesting or a stray closing tag; the tracker stops here.
    Malformed,
    /// The tracker already stopped on an earlier malformed token.
    Stopped,
}

/// Incremental left-to-right span matcher shared by the parser and the sampler.
#[derive(Debug, Clone)]
pub struct SpanTracker {
    markers: Markers,
    open: Option<(SpanKind, usize)>,
    spans: Vec<Span>,
    stopped: bool,
}

impl SpanTracker {
    pub fn new(markers: Markers) -> Self {
        Self {
            markers,
            open: None,
            spans: Vec::new(),
            stopped: false,
        }
    }

    /// Feeds the token at body index `pos`.
    pub fn push(&mut self, pos: usize, tok: TokenId) -> TrackEvent {
        if self.stopped {
            return TrackEvent::Stopped;
        }
        let opens = self.markers.opens(tok);
        let closes = self.markers.closes(tok);
        match self.open {
            None => {
                if let Some(kind) = opens {
                    self.open = Some((kind, pos));
                    TrackEvent::Opened(kind)
                } else if closes.is_some() {
                    self.stopped = true;
                    TrackEvent::Malformed
                } else {
                    TrackEvent::Content
                }
            }
            Some((kind, at)) => {
                if closes == Some(kind) {
                    let span = Span {
                        kind,
                        start: at + 1,
                        end: pos,
                    };
                    self.spans.push(span);
                    self.open = None;
                    TrackEvent::Closed(span)
                } else if opens.is_some() || closes.is_some() {
                    self.stopped = true;
                    TrackEvent::Malformed
                } else {
                    TrackEvent::Content
                }
            }
        }
    }

    pub fn open_span(&self) -> Option<(SpanKind, usize)> {
        self.open
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    /// Complete spans plus whether the sequence was malformed (stopped early
    /// or ended with an unclosed tag).
    pub fn finish(self) -> (Vec<Span>, bool) {
        let malformed = self.stopped || self.open.is_some();
        (self.spans, malformed)
    }
}

/// Parses a body. Never fails: malformed input keeps its complete prefix spans.
pub fn parse_trajectory(body: &[TokenId], vocab: &Vocab) -> Trajectory {
    parse_with_markers(body, vocab.markers())
}

pub fn parse_with_markers(body: &[TokenId], markers: Markers) -> Trajectory {
    let mut tracker = SpanTracker::new(markers);
    for (i, &tok) in body.iter().enumerate() {
        if tracker.push(i, tok) == TrackEvent::Malformed {
            break;
        }
    }
    let (spans, malformed) = tracker.finish();

    let mut excluded = vec![false; body.len()];
    let mut query_positions = Vec::new();
    for span in &spans {
        match span.kind {
            SpanKind::Documents => {
                for flag in &mut excluded[span.open_index()..=span.close_index()] {
                    *flag = true;
                }
            }
            SpanKind::Search => query_positions.extend(span.start..span.end),
            _ => {}
        }
    }
    let action_positions = (0..body.len()).filter(|&i| !excluded[i]).collect();
    let answer_text = spans
        .iter()
        .find(|s| s.kind == SpanKind::Answer)
        .map(|s| body[s.start..s.end].to_vec())
        .unwrap_or_default();

    Trajectory {
        question_tokens: Vec::new(),
        body_tokens: body.to_vec(),
        spans,
        action_positions,
        query_positions,
        answer_text,
        reward: 0.0,
        malformed,
    }
}

/// Renders a well-formed trajectory back to its body tokens.
///
/// The span table is checked against the body so that a trajectory whose
/// fields were edited inconsistently is rejected rather than silently emitted.
pub fn serialize_trajectory(t: &Trajectory, vocab: &Vocab) -> Result<Vec<TokenId>> {
    if t.malformed {
        return Err(Error::Malformed);
    }
    let markers = vocab.markers();
    let mut out = Vec::with_capacity(t.body_tokens.len());
    let mut cursor = 0;
    for span in &t.spans {
        if span.start == 0 || span.start < cursor || span.end > t.body_tokens.len() {
            return Err(Error::Malformed);
        }
        out.extend_from_slice(&t.body_tokens[cursor..span.open_index()]);
        if t.body_tokens[span.open_index()] != markers.open_tag(span.kind)
            || t.body_tokens.get(span.close_index()) != Some(&markers.close_tag(span.kind))
        {
            return Err(Error::Malformed);
        }
        out.push(markers.open_tag(span.kind));
        out.extend_from_slice(&t.body_tokens[span.start..span.end]);
        out.push(markers.close_tag(span.kind));
        cursor = span.close_index() + 1;
    }
    out.extend_from_slice(&t.body_tokens[cursor..]);
    Ok(out)
}
