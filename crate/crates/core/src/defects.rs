//! Synthetic defect profiles with known labels.
//!
//! Sources are non-defective (profile, item) pairs: the simulator interacted,
//! the user rated the item at least 3, and the profile holds at least one
//! relevant positive statement and no relevant negative one. Each sample
//! records the edits that turn the original profile into the defective one.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::{index, IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::catalog::Item;
use crate::error::{Error, Result};
use crate::profile::{join_topics, Preference, PreferenceStatement, Sentiment, UserProfile};
use crate::seed::{self, Rng};
use crate::simulator::{Behavior, DiscrepancyCase, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DefectLabel {
    Inaccurate,
    Incomplete,
    InaccurateAndIncomplete,
}

impl DefectLabel {
    pub const ALL: [DefectLabel; 3] = [
        DefectLabel::Inaccurate,
        DefectLabel::Incomplete,
        DefectLabel::InaccurateAndIncomplete,
    ];

    pub fn utterance(self) -> &'static str {
        match self {
            DefectLabel::Inaccurate => "Inaccurate",
            DefectLabel::Incomplete => "Incomplete",
            DefectLabel::InaccurateAndIncomplete => "Inaccurate & Incomplete",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_utterance(raw: &str) -> Option<Self> {
        let norm: String = raw
            .to_ascii_lowercase()
            .replace('&', " and ")
            .chars()
            .map(|c| if c.is_ascii_alphabetic() { c } else { ' ' })
            .collect();
        let words: Vec<&str> = norm.split_whitespace().collect();
        match words.as_slice() {
            ["inaccurate"] => Some(DefectLabel::Inaccurate),
            ["incomplete"] => Some(DefectLabel::Incomplete),
            ["inaccurate", "and", "incomplete"]
            | ["inaccurate", "incomplete"]
            | ["inaccurateandincomplete"]
            | ["both"] => Some(DefectLabel::InaccurateAndIncomplete),
            _ => None,
        }
    }
}

impl fmt::Display for DefectLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.utterance())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Edit {
    Remove { statement_id: String },
    Flip { statement_id: String, text: String },
}

/// Replay edits over a statement list.
pub fn apply_edits(statements: &[PreferenceStatement], edits: &[Edit]) -> Vec<PreferenceStatement> {
    let mut out = statements.to_vec();
    for edit in edits {
        match edit {
            Edit::Remove { statement_id } => out.retain(|s| &s.id != statement_id),
            Edit::Flip { statement_id, text } => {
                if let Some(s) = out.iter_mut().find(|s| &s.id == statement_id) {
                    s.pref.sentiment = s.pref.sentiment.flipped();
                    s.pref.text = text.clone();
                }
            }
        }
    }
    out
}

/// Produces the opposite-sentiment wording for a statement.
pub trait Negation: Send + Sync {
    fn negate(&self, pref: &Preference) -> String;
}

/// "Averse to <topics>".
#[derive(Debug, Default, Clone, Copy)]
pub struct TemplateNegation;

impl Negation for TemplateNegation {
    fn negate(&self, pref: &Preference) -> String {
        format!("Averse to {}", join_topics(&pref.topics).replace("; ", " and "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectSample {
    pub user_id: String,
    pub original: UserProfile,
    pub defective: UserProfile,
    pub target_item: Item,
    pub rating: u8,
    pub label: DefectLabel,
    pub edits: Vec<Edit>,
}

impl DefectSample {
    /// The decline-discrepancy this sample stands for.
    pub fn case(&self) -> DiscrepancyCase {
        DiscrepancyCase {
            item: self.target_item.clone(),
            rating: self.rating,
            simulated: Behavior {
                interact: false,
                rationale: "declined by the defective profile".into(),
                source: Source::Simulated,
            },
            real: Behavior::observed(),
            position: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skipped(pub String);

fn relevant_ids(profile: &UserProfile, item: &Item, sentiment: Sentiment) -> Vec<String> {
    profile
        .statements
        .iter()
        .filter(|s| s.pref.sentiment == sentiment && s.pref.is_relevant_to(&item.attributes))
        .map(|s| s.id.clone())
        .collect()
}

fn check_clean(profile: &UserProfile, item: &Item) -> Result<Vec<String>, Skipped> {
    if !relevant_ids(profile, item, Sentiment::Negative).is_empty() {
        return Err(Skipped("profile already holds a relevant negative statement".into()));
    }
    let positives = relevant_ids(profile, item, Sentiment::Positive);
    if positives.is_empty() {
        return Err(Skipped("no relevant statement".into()));
    }
    Ok(positives)
}

fn flip_edit(profile: &UserProfile, id: &str, negation: &dyn Negation) -> Edit {
    let stmt = profile.statements.iter().find(|s| s.id == id).expect("id from profile");
    Edit::Flip {
        statement_id: id.to_string(),
        text: negation.negate(&stmt.pref),
    }
}

fn sample(
    profile: &UserProfile,
    item: &Item,
    rating: u8,
    label: DefectLabel,
    edits: Vec<Edit>,
) -> DefectSample {
    let mut defective = profile.clone();
    defective.statements = apply_edits(&profile.statements, &edits);
    DefectSample {
        user_id: profile.user_id.clone(),
        original: profile.clone(),
        defective,
        target_item: item.clone(),
        rating,
        label,
        edits,
    }
}

/// Flip one relevant positive statement. Needs two, so that a positive one
/// remains and the defect stays distinguishable from the combined label.
pub fn make_inaccurate(
    profile: &UserProfile,
    item: &Item,
    rating: u8,
    rng: &mut Rng,
    negation: &dyn Negation,
) -> Result<DefectSample, Skipped> {
    let positives = check_clean(profile, item)?;
    if positives.len() < 2 {
        return Err(Skipped("needs two relevant positive statements".into()));
    }
    let id = positives.choose(rng).expect("non-empty");
    let edits = vec![flip_edit(profile, id, negation)];
    Ok(sample(profile, item, rating, DefectLabel::Inaccurate, edits))
}

pub fn removal_count(rho: f64, relevant: usize) -> usize {
    ((rho * relevant as f64).ceil() as usize).clamp(1, relevant)
}

fn remove_edits(ids: &[String], k: usize, rng: &mut Rng) -> Vec<Edit> {
    let mut picked = index::sample(rng, ids.len(), k).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| Edit::Remove {
            statement_id: ids[i].clone(),
        })
        .collect()
}

pub fn make_incomplete(
    profile: &UserProfile,
    item: &Item,
    rating: u8,
    rho: f64,
    rng: &mut Rng,
) -> Result<DefectSample, Skipped> {
    let positives = check_clean(profile, item)?;
    let edits = remove_edits(&positives, removal_count(rho, positives.len()), rng);
    Ok(sample(profile, item, rating, DefectLabel::Incomplete, edits))
}

/// Incomplete edit (keeping at least one relevant statement), then every
/// remaining relevant statement flipped.
pub fn make_both(
    profile: &UserProfile,
    item: &Item,
    rating: u8,
    rho: f64,
    rng: &mut Rng,
    negation: &dyn Negation,
) -> Result<DefectSample, Skipped> {
    let positives = check_clean(profile, item)?;
    if positives.len() < 2 {
        return Err(Skipped("needs two relevant statements".into()));
    }
    let k = removal_count(rho, positives.len()).min(positives.len() - 1);
    let mut edits = remove_edits(&positives, k, rng);
    let reduced = apply_edits(&profile.statements, &edits);
    for stmt in &reduced {
        if positives.contains(&stmt.id) {
            edits.push(flip_edit(profile, &stmt.id, negation));
        }
    }
    Ok(sample(profile, item, rating, DefectLabel::InaccurateAndIncomplete, edits))
}

/// A candidate non-defective (profile, item) pair.
#[derive(Debug, Clone)]
pub struct SourcePair<'a> {
    pub profile: &'a UserProfile,
    pub item: &'a Item,
    pub rating: u8,
    pub simulated_interact: bool,
}

impl SourcePair<'_> {
    pub fn is_eligible(&self) -> bool {
        self.simulated_interact && self.rating >= 3 && check_clean(self.profile, self.item).is_ok()
    }

    fn relevant_positive(&self) -> usize {
        relevant_ids(self.profile, self.item, Sentiment::Positive).len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectCorpus {
    pub train: Vec<DefectSample>,
    pub test: Vec<DefectSample>,
    pub eligible_pairs: usize,
    pub ineligible_pairs: usize,
}

/// Largest-remainder apportionment of `n` over `mix`.
pub fn apportion(mix: [f64; 3], n: usize) -> [usize; 3] {
    let total: f64 = mix.iter().sum();
    let quotas: Vec<f64> = mix.iter().map(|m| m / total * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusParams {
    /// Label proportions in `DefectLabel::ALL` order.
    pub mix: [f64; 3],
    pub rho: f64,
    pub train_fraction: f64,
    /// Total samples; all eligible pairs when unset.
    pub target: Option<usize>,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            mix: [1.0 / 3.0; 3],
            rho: 0.5,
            train_fraction: 0.8,
            target: None,
        }
    }
}

/// One sample per selected pair, labels apportioned by `mix`, split 8:2
/// per label.
pub fn build_defect_corpus(
    pairs: &[SourcePair<'_>],
    params: &CorpusParams,
    base_seed: u64,
    negation: &dyn Negation,
) -> Result<DefectCorpus> {
    let eligible: Vec<&SourcePair> = pairs.iter().filter(|p| p.is_eligible()).collect();
    let n = params.target.unwrap_or(eligible.len());
    let counts = apportion(params.mix, n);

    let mut rng = seed::rng(base_seed, &["defect-corpus"]);
    let mut pool: Vec<usize> = (0..eligible.len()).collect();
    pool.shuffle(&mut rng);

    // the two-statement labels are the constrained ones, so fill them first
    let mut assigned: BTreeMap<DefectLabel, Vec<usize>> = BTreeMap::new();
    let mut problems = Vec::new();
    for label in [
        DefectLabel::Inaccurate,
        DefectLabel::InaccurateAndIncomplete,
        DefectLabel::Incomplete,
    ] {
        let want = counts[label.index()];
        let need = if label == DefectLabel::Incomplete { 1 } else { 2 };
        let mut taken = Vec::with_capacity(want);
        pool.retain(|&i| {
            if taken.len() < want && eligible[i].relevant_positive() >= need {
                taken.push(i);
                false
            } else {
                true
            }
        });
        if taken.len() < want {
            problems.push(format!("{label}: wanted {want}, only {} eligible pairs", taken.len()));
        }
        assigned.insert(label, taken);
    }
    if !problems.is_empty() {
        return Err(Error::Precondition(format!(
            "insufficient eligible pairs for requested mix: {}",
            problems.join("; ")
        )));
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in DefectLabel::ALL {
        let mut samples = Vec::new();
        for &i in &assigned[&label] {
            let p = eligible[i];
            let mut rng = seed::rng(
                base_seed,
                &["defect", &p.profile.user_id, &p.item.raw_id, label.utterance()],
            );
            let made = match label {
                DefectLabel::Inaccurate => make_inaccurate(p.profile, p.item, p.rating, &mut rng, negation),
                DefectLabel::Incomplete => make_incomplete(p.profile, p.item, p.rating, params.rho, &mut rng),
                DefectLabel::InaccurateAndIncomplete => {
                    make_both(p.profile, p.item, p.rating, params.rho, &mut rng, negation)
                }
            };
            samples.push(made.map_err(|s| Error::Invariant(format!("eligible pair skipped: {}", s.0)))?);
        }
        let n_train = (samples.len() as f64 * params.train_fraction).round() as usize;
        let rest = samples.split_off(n_train);
        train.extend(samples);
        test.extend(rest);
    }
    Ok(DefectCorpus {
        train,
        test,
        eligible_pairs: eligible.len(),
        ineligible_pairs: pairs.len() - eligible.len(),
    })
}
