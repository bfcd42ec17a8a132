use serde::{Deserialize, Serialize};

use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Support {
    Full,
    /// Sorted, duplicate-free token ids.
    Truncated(Vec<TokenId>),
}

/// Probability vector over the vocabulary or over a truncated support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorical {
    pub support: Support,
    pub probs: Vec<f64>,
}

impl Categorical {
    pub fn full(probs: Vec<f64>) -> Self {
        Self {
            support: Support::Full,
            probs,
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Token id of the `i`-th probability entry.
    pub fn id_at(&self, i: usize) -> TokenId {
        match &self.support {
            Support::Full => i as TokenId,
            Support::Truncated(ids) => ids[i],
        }
    }

    pub fn prob_of(&self, tok: TokenId) -> f64 {
        match &self.support {
            Support::Full => self.probs.get(tok as usize).copied().unwrap_or(0.0),
            Support::Truncated(ids) => ids.binary_search(&tok).map(|i| self.probs[i]).unwrap_or(0.0),
        }
    }

    /// Shannon entropy in nats, with 0 log 0 = 0.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Smallest id among the most probable entries.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        self.id_at(best)
    }

    /// Non-negative entries summing to one within `tol`, sorted support.
    pub fn is_valid(&self, tol: f64) -> bool {
        let sorted = match &self.support {
            Support::Full => true,
            Support::Truncated(ids) => ids.len() == self.probs.len() && ids.windows(2).all(|w| w[0] < w[1]),
        };
        sorted
            && self.probs.iter().all(|&p| p >= 0.0 && p.is_finite())
            && (self.probs.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_entropy() {
        let c = Categorical {
            support: Support::Truncated(vec![2, 5]),
            probs: vec![0.25, 0.75],
        };
        assert_eq!(c.prob_of(5), 0.75);
        assert_eq!(c.prob_of(3), 0.0);
        assert_eq!(c.argmax(), 5);
        assert!(c.is_valid(1e-12));
        let u = Categorical::full(vec![0.25; 4]);
        assert!((u.entropy() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(u.argmax(), 0);
    }
}
