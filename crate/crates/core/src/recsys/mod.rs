//! Sequential recommenders.
//!
//! A recommender scores candidates given a user and that user's history so
//! far. The arena owns the history and extends it with [`Session::advance`].

pub mod baselines;
pub mod external;
pub mod fpmc;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::catalog::ItemId;
use crate::error::{Error, Result};

pub use baselines::{MarkovBaseline, PopularityBaseline};
pub use external::ExternalRecommender;
pub use fpmc::{Fpmc, FpmcParams};

/// Training sequences in chronological order, one per user.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingData {
    pub num_items: usize,
    pub sequences: Vec<(String, Vec<ItemId>)>,
}

pub trait Recommender: Send + Sync {
    fn id(&self) -> &str;

    /// One score per candidate, higher is better.
    fn score(&self, user: &str, history: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub user_id: String,
    pub history: Vec<ItemId>,
}

impl Session {
    pub fn new(user_id: impl Into<String>, history: Vec<ItemId>) -> Self {
        Self {
            user_id: user_id.into(),
            history,
        }
    }

    pub fn advance(&mut self, item: ItemId) {
        self.history.push(item);
    }

    pub fn last(&self) -> Option<ItemId> {
        self.history.last().copied()
    }
}

/// Candidates sorted by descending score, ties broken by ascending item id.
pub fn rank_slate(rec: &dyn Recommender, session: &Session, candidates: &[ItemId]) -> Result<Vec<(ItemId, f64)>> {
    let unique: BTreeSet<ItemId> = candidates.iter().copied().collect();
    if unique.len() != candidates.len() {
        return Err(Error::Precondition("duplicate candidates in slate".into()));
    }
    let scores = rec.score(&session.user_id, &session.history, candidates)?;
    if scores.len() != candidates.len() {
        return Err(Error::Invariant(format!(
            "{} returned {} scores for {} candidates",
            rec.id(),
            scores.len(),
            candidates.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Invariant(format!("{} returned non-finite score {bad}", rec.id())));
    }
    let mut ranked: Vec<(ItemId, f64)> = candidates.iter().copied().zip(scores).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}
