//! Closed token vocabulary with reserved structural and markup tokens.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::SpanKind;

pub type TokenId = u32;

pub const MAX_VOCAB: usize = 512;

/// Roles that must map to dedicated tokens in every vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reserved {
    OpenThink,
    CloseThink,
    OpenSearch,
    CloseSearch,
    OpenDocs,
    CloseDocs,
    OpenAnswer,
    CloseAnswer,
    Eos,
    Pad,
    NoSearch,
    NoQuery,
    HbHeader,
    HbSibling,
    HbArrow,
    HbOutcome,
    HbEnd,
    LblCorrect,
    LblIncorrect,
}

impl Reserved {
    pub const ALL: [Reserved; 19] = [
        Reserved::OpenThink,
        Reserved::CloseThink,
        Reserved::OpenSearch,
        Reserved::CloseSearch,
        Reserved::OpenDocs,
        Reserved::CloseDocs,
        Reserved::OpenAnswer,
        Reserved::CloseAnswer,
        Reserved::Eos,
        Reserved::Pad,
        Reserved::NoSearch,
        Reserved::NoQuery,
        Reserved::HbHeader,
        Reserved::HbSibling,
        Reserved::HbArrow,
        Reserved::HbOutcome,
        Reserved::HbEnd,
        Reserved::LblCorrect,
        Reserved::LblIncorrect,
    ];

    /// Surface string used by the built-in vocabularies.
    pub fn default_surface(self) -> &'static str {
        match self {
            Reserved::OpenThink => "<think>",
            Reserved::CloseThink => "</think>",
            Reserved::OpenSearch => "<search>",
            Reserved::CloseSearch => "</search>",
            Reserved::OpenDocs => "<documents>",
            Reserved::CloseDocs => "</documents>",
            Reserved::OpenAnswer => "<answer>",
            Reserved::CloseAnswer => "</answer>",
            Reserved::Eos => "<eos>",
            Reserved::Pad => "<pad>",
            Reserved::NoSearch => "<nosearch>",
            Reserved::NoQuery => "<noquery>",
            Reserved::HbHeader => "<hindsight>",
            Reserved::HbSibling => "<sibling>",
            Reserved::HbArrow => "->",
            Reserved::HbOutcome => "<outcome>",
            Reserved::HbEnd => "</hindsight>",
            Reserved::LblCorrect => "Correct",
            Reserved::LblIncorrect => "Incorrect",
        }
    }
}

/// Ids of the reserved tokens, resolved once per vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Markers {
    ids: [TokenId; 19],
}

impl Markers {
    pub fn get(&self, role: Reserved) -> TokenId {
        self.ids[role as usize]
    }

    pub fn open_tag(&self, kind: SpanKind) -> TokenId {
        match kind {
            SpanKind::Think => self.get(Reserved::OpenThink),
            SpanKind::Search => self.get(Reserved::OpenSearch),
            SpanKind::Documents => self.get(Reserved::OpenDocs),
            SpanKind::Answer => self.get(Reserved::OpenAnswer),
        }
    }

    pub fn close_tag(&self, kind: SpanKind) -> TokenId {
        match kind {
            SpanKind::Think => self.get(Reserved::CloseThink),
            SpanKind::Search => self.get(Reserved::CloseSearch),
            SpanKind::Documents => self.get(Reserved::CloseDocs),
            SpanKind::Answer => self.get(Reserved::CloseAnswer),
        }
    }

    /// Span kind opened by `tok`, if it is an opening tag.
    pub fn opens(&self, tok: TokenId) -> Option<SpanKind> {
        SpanKind::ALL.into_iter().find(|&k| self.open_tag(k) == tok)
    }

    /// Span kind closed by `tok`, if it is a closing tag.
    pub fn closes(&self, tok: TokenId) -> Option<SpanKind> {
        SpanKind::ALL.into_iter().find(|&k| self.close_tag(k) == tok)
    }

    /// True for the eight span tags.
    pub fn is_tag(&self, tok: TokenId) -> bool {
        self.opens(tok).is_some() || self.closes(tok).is_some()
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    markers: Markers,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    reserved: BTreeMap<Reserved, String>,
}

impl Vocab {
    /// Builds a vocabulary from distinct token strings and a role map.
    pub fn new(tokens: Vec<String>, reserved: &BTreeMap<Reserved, String>) -> Result<Self> {
        if tokens.len() > MAX_VOCAB {
            return Err(Error::Vocab(format!(
                "{} tokens exceeds the limit of {MAX_VOCAB}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("token `{t}` is empty or contains whitespace")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Vocab(format!("duplicate token `{t}`")));
            }
        }
        let mut ids = [0 as TokenId; 19];
        for role in Reserved::ALL {
            let surface = reserved
                .get(&role)
                .ok_or_else(|| Error::Vocab(format!("missing reserved role {role:?}")))?;
            ids[role as usize] = *index
                .get(surface)
                .ok_or_else(|| Error::Vocab(format!("reserved token `{surface}` not in list")))?;
        }
        let mut sorted = ids;
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Vocab("reserved roles must map to distinct tokens".into()));
        }
        Ok(Self {
            tokens,
            index,
            markers: Markers { ids },
        })
    }

    /// Reserved tokens first (in role order), followed by `extra`.
    pub fn with_default_reserved<I, S>(extra: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = Reserved::ALL.iter().map(|r| r.default_surface().to_string()).collect();
        tokens.extend(extra.into_iter().map(Into::into));
        let reserved = Reserved::ALL
            .iter()
            .map(|r| (*r, r.default_surface().to_string()))
            .collect();
        Self::new(tokens, &reserved)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        Self::new(file.tokens, &file.reserved)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let reserved = Reserved::ALL
            .iter()
            .map(|r| (*r, self.tokens[self.markers.get(*r) as usize].clone()))
            .collect();
        let file = VocabFile {
            tokens: self.tokens.clone(),
            reserved,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn markers(&self) -> Markers {
        self.markers
    }

    pub fn id(&self, role: Reserved) -> TokenId {
        self.markers.get(role)
    }

    pub fn is_reserved(&self, tok: TokenId) -> bool {
        self.markers.ids.contains(&tok)
    }

    pub fn lookup(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace-separated encoding; every piece must be a known token.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| self.lookup(w).ok_or_else(|| Error::UnknownToken(w.to_string())))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn surfaces(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_vocab_is_dense_and_distinct() {
        let v = Vocab::with_default_reserved(["a", "b"]).unwrap();
        assert_eq!(v.len(), 21);
        assert_eq!(v.lookup("b"), Some(20));
        let m = v.markers();
        assert_eq!(m.opens(v.id(Reserved::OpenSearch)), Some(SpanKind::Search));
        assert_eq!(m.closes(v.id(Reserved::CloseDocs)), Some(SpanKind::Documents));
        assert!(!m.is_tag(v.id(Reserved::Eos)));
    }

    #[test]
    fn rejects_duplicates_and_oversize() {
        assert!(Vocab::with_default_reserved(["x", "x"]).is_err());
        let many: Vec<String> = (0..MAX_VOCAB).map(|i| format!("t{i}")).collect();
        assert!(Vocab::with_default_reserved(many).is_err());
    }

    #[test]
    fn json_round_trip() {
        let v = Vocab::with_default_reserved(["alpha", "beta"]).unwrap();
        let back = Vocab::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.markers(), v.markers());
    }

    #[test]
    fn reserved_roles_must_be_distinct() {
        let tokens = vec!["<s>".to_string(), "x".to_string()];
        let reserved = Reserved::ALL.iter().map(|r| (*r, "<s>".to_string())).collect();
        assert!(Vocab::new(tokens, &reserved).is_err());
    }

    #[test]
    fn rejects_whitespace_tokens() {
        assert!(Vocab::with_default_reserved(["a b"]).is_err());
        assert!(Vocab::with_default_reserved([""]).is_err());
    }

    #[test]
    fn encode_unknown_fails() {
        let v = Vocab::with_default_reserved(["a"]).unwrap();
        assert!(matches!(v.encode("a zzz"), Err(Error::UnknownToken(t)) if t == "zzz"));
    }
}
