//! Simulator-recommender interaction over each user's test segment.
//!
//! Round `t` ranks the ground-truth item `test[t]` among seeded negatives the
//! user never touched. The simulator judges every candidate; those judgments
//! feed the metrics. The highest-ranked accepted item, if any, is the
//! selection. The profile update strategy decides what the session and the
//! profile learn from the round.

use std::collections::BTreeSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::catalog::{InteractionDataset, ItemId, UserSplit};
use crate::error::{Error, Result};
use crate::profile::{self, UpdateStrategy, UserProfile};
use crate::recsys::{rank_slate, Recommender, Session};
use crate::seed;
use crate::simulator;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArenaParams {
    pub negatives: usize,
    /// Rounds per user; the whole test segment when unset.
    pub rounds: Option<usize>,
    pub strategy: UpdateStrategy,
    pub reprompts: u32,
}

impl Default for ArenaParams {
    fn default() -> Self {
        Self {
            negatives: 19,
            rounds: None,
            strategy: UpdateStrategy::None,
            reprompts: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub item: ItemId,
    pub rank: usize,
    pub score: f64,
    pub relevant: bool,
    pub accepted: bool,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub user_id: String,
    /// 1-based.
    pub round: usize,
    pub strategy: UpdateStrategy,
    pub ground_truth: ItemId,
    /// In slate order.
    pub judgments: Vec<Judgment>,
    pub selected: Option<ItemId>,
    pub version_before: u32,
    pub version_after: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub exited: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Confusion {
    pub fn add(&mut self, relevant: bool, accepted: bool) {
        match (relevant, accepted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Selection-only view: one decision per round, the selected item.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub rounds: usize,
    pub selections: usize,
    pub hits: usize,
}

impl SelectionStats {
    pub fn add(&mut self, r: &RoundRecord) {
        self.rounds += 1;
        if let Some(s) = r.selected {
            self.selections += 1;
            self.hits += (s == r.ground_truth) as usize;
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.hits, self.selections)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.hits, self.rounds)
    }
}

pub fn confusion_of(rounds: &[RoundRecord]) -> Confusion {
    let mut c = Confusion::default();
    for j in rounds.iter().flat_map(|r| &r.judgments) {
        c.add(j.relevant, j.accepted);
    }
    c
}

#[derive(Debug, Clone)]
pub struct UserArena {
    pub rounds: Vec<RoundRecord>,
    pub profile: UserProfile,
}

/// Seeded negatives for one (user, round), drawn from items outside the user's history.
pub fn draw_negatives(
    num_items: usize,
    history: &BTreeSet<ItemId>,
    n: usize,
    base_seed: u64,
    user_id: &str,
    round: usize,
) -> Result<Vec<ItemId>> {
    let pool: Vec<ItemId> = (0..num_items as ItemId).filter(|i| !history.contains(i)).collect();
    if pool.len() < n {
        return Err(Error::Precondition(format!(
            "user {user_id}: {} unseen items, {n} negatives needed",
            pool.len()
        )));
    }
    let mut rng = seed::rng(base_seed, &["arena-negatives", user_id, &round.to_string()]);
    let mut picked: Vec<ItemId> = index::sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

pub struct Participants<'a> {
    pub recommender: &'a dyn Recommender,
    pub simulator: &'a dyn Backend,
}

pub fn run_user(
    dataset: &InteractionDataset,
    split: &UserSplit,
    initial: &UserProfile,
    who: &Participants<'_>,
    params: &ArenaParams,
    base_seed: u64,
) -> Result<UserArena> {
    let history = split.history_items();
    let mut session = Session::new(split.user_id.clone(), split.train().iter().map(|e| e.item).collect());
    session.advance(split.validation.item);
    let mut profile = initial.clone();
    let mut rounds = Vec::new();
    let n_rounds = params.rounds.unwrap_or(split.test.len()).min(split.test.len());

    for (idx, gt_event) in split.test.iter().take(n_rounds).enumerate() {
        let round = idx + 1;
        let gt = gt_event.item;
        let mut candidates = draw_negatives(
            dataset.items.len(),
            &history,
            params.negatives,
            base_seed,
            &split.user_id,
            round,
        )?;
        candidates.push(gt);
        let ranked = rank_slate(who.recommender, &session, &candidates)?;

        let mut judgments = Vec::with_capacity(ranked.len());
        let mut exited = false;
        for (rank, (item, score)) in ranked.into_iter().enumerate() {
            let d = simulator::judge(&profile, dataset.item(item)?, who.simulator, params.reprompts)?;
            exited |= d.exit;
            judgments.push(Judgment {
                item,
                rank,
                score,
                relevant: item == gt,
                accepted: d.interact && !d.exit,
                rationale: d.rationale,
            });
        }
        let selected = judgments.iter().find(|j| j.accepted).map(|j| j.item);

        match params.strategy {
            UpdateStrategy::WithGt => session.advance(gt),
            UpdateStrategy::None | UpdateStrategy::WithoutGt => {
                if let Some(s) = selected {
                    session.advance(s);
                }
            }
        }
        let selected_item = selected.map(|s| dataset.item(s)).transpose()?;
        let version_before = profile.version;
        profile = profile::update_profile(
            &profile,
            params.strategy,
            selected_item,
            dataset.item(gt)?,
            round as u32,
            who.simulator,
            params.reprompts,
        )?;
        rounds.push(RoundRecord {
            user_id: split.user_id.clone(),
            round,
            strategy: params.strategy,
            ground_truth: gt,
            judgments,
            selected,
            version_before,
            version_after: profile.version,
            exited,
        });
        if exited {
            break;
        }
    }
    Ok(UserArena { rounds, profile })
}
