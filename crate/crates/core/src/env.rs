//! Synthetic multi-hop knowledge-graph QA corpus and its overlap retriever.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::vocab::{TokenId, Vocab};

/// Number of filler tokens available for think spans.
pub const N_FILLER: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub id: usize,
    pub subject: TokenId,
    pub relation: TokenId,
    pub object: TokenId,
    pub surface: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: usize,
    pub hops: usize,
    pub prompt_tokens: Vec<TokenId>,
    pub gold_answer: Vec<TokenId>,
    pub gold_path: Vec<usize>,
}

/// Generation parameters. Everything in a corpus follows from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_questions: usize,
    /// Relative weights of 1-, 2- and 3-hop questions.
    pub hop_mix: [f64; 3],
    /// Probability that an (entity, relation) pair has an object.
    pub density: f64,
}

impl CorpusSpec {
    pub fn new(seed: u64, n_entities: usize, n_relations: usize, n_questions: usize, hops: usize) -> Self {
        let mut hop_mix = [0.0; 3];
        hop_mix[hops.clamp(1, 3) - 1] = 1.0;
        Self {
            seed,
            n_entities,
            n_relations,
            n_questions,
            hop_mix,
            density: 0.6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub facts: Vec<Fact>,
    pub questions: Vec<Question>,
    #[serde(skip, default = "placeholder_vocab")]
    vocab: Option<Vocab>,
}

fn placeholder_vocab() -> Option<Vocab> {
    None
}

pub fn entity_token(i: usize) -> String {
    format!("e{i}")
}

pub fn relation_token(i: usize) -> String {
    format!("r{i}")
}

pub fn filler_token(i: usize) -> String {
    format!("t{i}")
}

/// Reserved tokens, then entities `e*`, relations `r*`, think fillers `t*`.
pub fn synthetic_vocab(n_entities: usize, n_relations: usize) -> Result<Vocab> {
    let extra = (0..n_entities)
        .map(entity_token)
        .chain((0..n_relations).map(relation_token))
        .chain((0..N_FILLER).map(filler_token));
    Vocab::with_default_reserved(extra)
}

impl Corpus {
    pub fn vocab(&self) -> &Vocab {
        self.vocab.as_ref().expect("corpus vocabulary is built on construction")
    }

    pub fn entity_ids(&self) -> Vec<TokenId> {
        (0..self.spec.n_entities)
            .map(|i| self.vocab().lookup(&entity_token(i)).expect("entity token"))
            .collect()
    }

    pub fn relation_ids(&self) -> Vec<TokenId> {
        (0..self.spec.n_relations)
            .map(|i| self.vocab().lookup(&relation_token(i)).expect("relation token"))
            .collect()
    }

    pub fn filler_ids(&self) -> Vec<TokenId> {
        (0..N_FILLER)
            .map(|i| self.vocab().lookup(&filler_token(i)).expect("filler token"))
            .collect()
    }

    /// Last `n_eval` questions form the eval split, the rest are for training.
    pub fn split(&self, n_eval: usize) -> (&[Question], &[Question]) {
        let cut = self.questions.len().saturating_sub(n_eval);
        self.questions.split_at(cut)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut c: Corpus = serde_json::from_str(text)?;
        let vocab = synthetic_vocab(c.spec.n_entities, c.spec.n_relations)?;
        let bound = vocab.len() as TokenId;
        let in_range = |t: &TokenId| *t < bound;
        let facts_ok = c.facts.iter().enumerate().all(|(i, f)| {
            f.id == i && f.surface == [f.subject, f.relation, f.object] && f.surface.iter().all(in_range)
        });
        let questions_ok = c.questions.iter().all(|q| {
            q.prompt_tokens.iter().all(in_range)
                && q.gold_answer.iter().all(in_range)
                && q.gold_path.iter().all(|&f| f < c.facts.len())
        });
        if !facts_ok || !questions_ok {
            return Err(Error::Corpus("corpus file is inconsistent".into()));
        }
        c.vocab = Some(vocab);
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the canonical JSON dump.
    pub fn content_hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_json()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn retriever(&self) -> Retriever {
        Retriever::new(&self.facts)
    }
}

/// Builds the random functional graph and samples distinct walk questions.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    if spec.n_entities < 2 {
        return Err(Error::Corpus("need at least 2 entities".into()));
    }
    if spec.n_relations < 1 {
        return Err(Error::Corpus("need at least 1 relation".into()));
    }
    if !(spec.density > 0.0 && spec.density <= 1.0) {
        return Err(Error::Corpus("density must lie in (0, 1]".into()));
    }
    if spec.hop_mix.iter().any(|w| *w < 0.0 || !w.is_finite()) || spec.hop_mix.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Corpus(
            "hop mix needs non-negative weights with a positive sum".into(),
        ));
    }
    let vocab = synthetic_vocab(spec.n_entities, spec.n_relations)?;
    let ent: Vec<TokenId> = (0..spec.n_entities)
        .map(|i| vocab.lookup(&entity_token(i)).expect("entity"))
        .collect();
    let rel: Vec<TokenId> = (0..spec.n_relations)
        .map(|i| vocab.lookup(&relation_token(i)).expect("relation"))
        .collect();

    let mut rng = substream(spec.seed, "corpus", &[]);
    let mut facts = Vec::new();
    // edges[e][r] = fact id
    let mut edges = vec![vec![None; spec.n_relations]; spec.n_entities];
    for (e, row) in edges.iter_mut().enumerate() {
        for (r, slot) in row.iter_mut().enumerate() {
            if rng.gen::<f64>() < spec.density {
                let mut o = rng.gen_range(0..spec.n_entities - 1);
                if o >= e {
                    o += 1;
                }
                let id = facts.len();
                facts.push(Fact {
                    id,
                    subject: ent[e],
                    relation: rel[r],
                    object: ent[o],
                    surface: vec![ent[e], rel[r], ent[o]],
                });
                *slot = Some((id, o));
            }
        }
    }

    let total: f64 = spec.hop_mix.iter().sum();
    let mut seen = BTreeSet::new();
    let mut questions = Vec::with_capacity(spec.n_questions);
    let max_attempts = spec.n_questions.saturating_mul(500).max(10_000);
    let mut attempts = 0;
    while questions.len() < spec.n_questions {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Corpus(format!(
                "could only sample {} of {} distinct questions",
                questions.len(),
                spec.n_questions
            )));
        }
        let mut u = rng.gen::<f64>() * total;
        let mut hops = 3;
        for (i, w) in spec.hop_mix.iter().enumerate() {
            if u < *w {
                hops = i + 1;
                break;
            }
            u -= w;
        }
        let start = rng.gen_range(0..spec.n_entities);
        let mut visited = vec![start];
        let mut path = Vec::with_capacity(hops);
        let mut rels = Vec::with_capacity(hops);
        let mut cur = start;
        let mut ok = true;
        for _ in 0..hops {
            let options: Vec<(usize, usize, usize)> = edges[cur]
                .iter()
                .enumerate()
                .filter_map(|(r, s)| s.map(|(f, o)| (r, f, o)))
                .filter(|(_, _, o)| !visited.contains(o))
                .collect();
            let Some(&(r, f, o)) = options.choose(&mut rng) else {
                ok = false;
                break;
            };
            rels.push(r);
            path.push(f);
            visited.push(o);
            cur = o;
        }
        if !ok || !seen.insert((start, rels.clone())) {
            continue;
        }
        let mut prompt = vec![ent[start]];
        prompt.extend(rels.iter().map(|&r| rel[r]));
        questions.push(Question {
            id: questions.len(),
            hops,
            prompt_tokens: prompt,
            gold_answer: vec![ent[cur]],
            gold_path: path,
        });
    }

    Ok(Corpus {
        spec: spec.clone(),
        facts,
        questions,
        vocab: Some(vocab),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub fact_ids: Vec<usize>,
    pub docs: Vec<Vec<TokenId>>,
    pub hit_gold: Vec<bool>,
}

impl RetrievalResult {
    /// Marks each document by whether it contains any gold token.
    pub fn mark_gold(&mut self, gold: &[TokenId]) {
        self.hit_gold = self.docs.iter().map(|d| d.iter().any(|t| gold.contains(t))).collect();
    }
}

/// Inverted index over fact surfaces for bag-overlap retrieval.
#[derive(Debug, Clone)]
pub struct Retriever {
    postings: HashMap<TokenId, Vec<(usize, usize)>>,
    surfaces: HashMap<usize, Vec<TokenId>>,
}

impl Retriever {
    pub fn new(facts: &[Fact]) -> Self {
        let mut postings: HashMap<TokenId, Vec<(usize, usize)>> = HashMap::new();
        let mut surfaces = HashMap::with_capacity(facts.len());
        for f in facts {
            let mut counts: HashMap<TokenId, usize> = HashMap::new();
            for &t in &f.surface {
                *counts.entry(t).or_default() += 1;
            }
            for (t, c) in counts {
                postings.entry(t).or_default().push((f.id, c));
            }
            surfaces.insert(f.id, f.surface.clone());
        }
        Self { postings, surfaces }
    }

    /// Top `k` facts by (shared-token count desc, id asc); zero scores excluded.
    pub fn retrieve(&self, query: &[TokenId], k: usize) -> RetrievalResult {
        let mut qcounts: HashMap<TokenId, usize> = HashMap::new();
        for &t in query {
            *qcounts.entry(t).or_default() += 1;
        }
        let mut scores: HashMap<usize, usize> = HashMap::new();
        for (t, qc) in qcounts {
            if let Some(list) = self.postings.get(&t) {
                for &(id, fc) in list {
                    *scores.entry(id).or_default() += qc.min(fc);
                }
            }
        }
        let mut ranked: Vec<(usize, usize)> = scores.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        let fact_ids: Vec<usize> = ranked.iter().map(|(id, _)| *id).collect();
        let docs = fact_ids.iter().map(|id| self.surfaces[id].clone()).collect();
        RetrievalResult {
            hit_gold: vec![false; fact_ids.len()],
            fact_ids,
            docs,
        }
    }
}

pub fn retrieve(query: &[TokenId], corpus: &[Fact], k: usize) -> RetrievalResult {
    Retriever::new(corpus).retrieve(query, k)
}
