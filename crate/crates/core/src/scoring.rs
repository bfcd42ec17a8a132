//! Answer scoring: SQuAD-style normalization, token F1, exact match, and the
//! thresholded outcome label used by the hindsight block.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Correct,
    Incorrect,
}

impl Outcome {
    pub fn flipped(self) -> Self {
        match self {
            Outcome::Correct => Outcome::Incorrect,
            Outcome::Incorrect => Outcome::Correct,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Correct => "Correct",
            Outcome::Incorrect => "Incorrect",
        }
    }
}

/// Lowercases, strips punctuation characters, drops articles and empty pieces.
///
/// Tokens containing internal whitespace are split, so `["21 January", "1426"]`
/// and `["21", "january", "1426"]` normalize identically.
pub fn normalize<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .flat_map(|t| {
            t.as_ref()
                .split_whitespace()
                .map(|w| {
                    w.chars()
                        .filter(|c| !c.is_ascii_punctuation())
                        .flat_map(char::to_lowercase)
                        .collect::<String>()
                })
                .collect::<Vec<_>>()
        })
        .filter(|w| !w.is_empty() && !ARTICLES.contains(&w.as_str()))
        .collect()
}

/// Bag-of-tokens F1 after normalization. Both sides empty scores 1.
pub fn token_f1<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gold: &[T]) -> f64 {
    let p = normalize(pred);
    let g = normalize(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &g {
        *counts.entry(w.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for w in &p {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn exact_match<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gold: &[T]) -> bool {
    normalize(pred) == normalize(gold)
}

/// Correct iff `f1 > rho`, except that `rho = 1` requires a perfect score.
pub fn outcome_label(f1: f64, rho: f64) -> Outcome {
    let correct = if rho >= 1.0 { f1 >= 1.0 } else { f1 > rho };
    if correct {
        Outcome::Correct
    } else {
        Outcome::Incorrect
    }
}
