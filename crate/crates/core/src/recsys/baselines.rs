//! Non-personalized reference recommenders.

use std::collections::BTreeMap;

use super::{Recommender, TrainingData};
use crate::catalog::ItemId;
use crate::error::Result;

/// First-order transition model with Laplace smoothing:
/// `P(j | i) = (c(i, j) + alpha) / (c(i) + alpha * N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovBaseline {
    num_items: usize,
    alpha: f64,
    transitions: BTreeMap<(ItemId, ItemId), u32>,
    outgoing: BTreeMap<ItemId, u32>,
}

impl MarkovBaseline {
    pub fn fit(data: &TrainingData, alpha: f64) -> Self {
        let mut transitions = BTreeMap::new();
        let mut outgoing = BTreeMap::new();
        for (_, seq) in &data.sequences {
            for w in seq.windows(2) {
                *transitions.entry((w[0], w[1])).or_insert(0) += 1;
                *outgoing.entry(w[0]).or_insert(0) += 1;
            }
        }
        Self {
            num_items: data.num_items.max(1),
            alpha,
            transitions,
            outgoing,
        }
    }

    pub fn probability(&self, from: ItemId, to: ItemId) -> f64 {
        let c = self.transitions.get(&(from, to)).copied().unwrap_or(0) as f64;
        let total = self.outgoing.get(&from).copied().unwrap_or(0) as f64;
        let denom = total + self.alpha * self.num_items as f64;
        if denom == 0.0 {
            1.0 / self.num_items as f64
        } else {
            (c + self.alpha) / denom
        }
    }
}

impl Recommender for MarkovBaseline {
    fn id(&self) -> &str {
        "markov"
    }

    fn score(&self, _user: &str, history: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>> {
        Ok(match history.last() {
            Some(&last) => candidates.iter().map(|&c| self.probability(last, c)).collect(),
            None => vec![1.0 / self.num_items as f64; candidates.len()],
        })
    }
}

/// Training-set interaction counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityBaseline {
    counts: Vec<u32>,
}

impl PopularityBaseline {
    pub fn fit(data: &TrainingData) -> Self {
        let mut counts = vec![0u32; data.num_items];
        for (_, seq) in &data.sequences {
            for &i in seq {
                if let Some(c) = counts.get_mut(i as usize) {
                    *c += 1;
                }
            }
        }
        Self { counts }
    }
}

impl Recommender for PopularityBaseline {
    fn id(&self) -> &str {
        "popularity"
    }

    fn score(&self, _user: &str, _history: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>> {
        Ok(candidates
            .iter()
            .map(|&c| self.counts.get(c as usize).copied().unwrap_or(0) as f64)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> TrainingData {
        TrainingData {
            num_items: 4,
            sequences: vec![("a".into(), vec![0, 1, 2]), ("b".into(), vec![0, 1, 3])],
        }
    }

    #[test]
    fn laplace_probabilities() {
        let m = MarkovBaseline::fit(&data(), 1.0);
        // c(0,1) = 2, c(0) = 2, N = 4
        assert!((m.probability(0, 1) - 3.0 / 6.0).abs() < 1e-12);
        assert!((m.probability(0, 2) - 1.0 / 6.0).abs() < 1e-12);
        // unseen source row is uniform
        assert!((m.probability(3, 0) - 0.25).abs() < 1e-12);
        let row: f64 = (0..4).map(|j| m.probability(1, j)).sum();
        assert!((row - 1.0).abs() < 1e-12);
    }

    #[test]
    fn popularity_counts() {
        let p = PopularityBaseline::fit(&data());
        assert_eq!(p.score("x", &[], &[0, 1, 2, 3]).unwrap(), [2.0, 2.0, 1.0, 1.0]);
    }
}
