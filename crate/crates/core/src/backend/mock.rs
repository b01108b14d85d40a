//! Deterministic rule-based backend.
//!
//! Reads the labelled sections of a prompt and answers every role with a
//! fixed policy:
//!
//! - init: one positive statement per genre covering at least 20% of the history;
//! - decide: interact iff some relevant statement is positive and none is negative;
//! - diagnose: the oracle rules, optionally corrupted at a seeded error rate;
//! - treatment: templated reasons, add/correct suggestions, structural refinement;
//! - update: flip one relevant negative, else add the item's genres, else nothing.
//!
//! The output is a pure function of (request, seed).

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use super::parse::{self, render_decision, Decision};
use super::{Backend, ChatRequest, ChatResponse, SchemaHint};
use crate::defects::DefectLabel;
use crate::diagnosis::classify;
use crate::error::BackendError;
use crate::profile::{self, join_topics, Preference, Sentiment};
use crate::prompts::{self, field, section, task};
use crate::seed;
use crate::treatment::{self, apply_suggestions, Suggestion, SuggestionKind};

pub const INIT_SHARE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct MockBackend {
    id: String,
    seed: u64,
    diagnosis_error_rate: f64,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            id: "mock".into(),
            seed,
            diagnosis_error_rate: 0.0,
        }
    }

    /// A weaker diagnoser: each answer is replaced by a wrong label with
    /// probability `rate`, decided by a hash of the prompt.
    pub fn with_diagnosis_error_rate(mut self, rate: f64) -> Self {
        self.diagnosis_error_rate = rate.clamp(0.0, 1.0);
        self.id = format!("mock-noisy-{rate}");
        self
    }

    fn answer(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let text = request.prompt_text();
        let hint = request
            .hint
            .ok_or_else(|| BackendError::InvalidRequest("mock backend needs a schema hint".into()))?;
        match hint {
            SchemaHint::Decision => Ok(decide(text)),
            SchemaHint::Diagnosis => Ok(self.diagnose(text)),
            SchemaHint::Reason => Ok(reasons(text)),
            SchemaHint::Suggestions => Ok(suggest(text)),
            SchemaHint::Profile => match prompts::task_of(text) {
                Some(task::INIT_PROFILE) => Ok(init_profile(text)),
                Some(task::REFINE) => Ok(refine(text)),
                Some(task::UPDATE_PROFILE) => Ok(update(text)),
                other => Err(BackendError::InvalidRequest(format!(
                    "mock backend cannot answer profile task {other:?}"
                ))),
            },
        }
    }

    fn diagnose(&self, text: &str) -> String {
        let prefs = profile_of(text);
        let attrs = genres_of(text, prompts::TARGET_ITEM);
        let (mut label, _) = classify(&prefs, &attrs);
        if self.diagnosis_error_rate > 0.0 {
            let h = seed::derive(self.seed, &["diagnose", text]);
            let u = (h >> 11) as f64 / (1u64 << 53) as f64;
            if u < self.diagnosis_error_rate {
                let shift = 1 + (h & 1) as usize;
                label = DefectLabel::ALL[(label.index() + shift) % 3];
            }
        }
        format!("Label: {}", label.utterance())
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete_raw(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        Ok(ChatResponse {
            text: self.answer(request)?,
            backend_id: self.id.clone(),
            latency: Duration::ZERO,
            token_counts: None,
        })
    }
}

fn profile_of(text: &str) -> Vec<Preference> {
    section(text, prompts::USER_PROFILE)
        .map(profile::parse_profile_lines)
        .unwrap_or_default()
}

fn genres_in(lines: &[&str]) -> BTreeSet<String> {
    field(lines, "Genres")
        .map(|g| profile::split_topics(g).map(str::to_string).collect())
        .unwrap_or_default()
}

fn genres_of(text: &str, header: &str) -> BTreeSet<String> {
    section(text, header).map(|l| genres_in(&l)).unwrap_or_default()
}

fn topics_phrase(topics: &BTreeSet<String>) -> String {
    if topics.is_empty() {
        "its genres".into()
    } else {
        join_topics(topics).replace("; ", " and ")
    }
}

fn relevant<'a>(prefs: &'a [Preference], attrs: &BTreeSet<String>, sentiment: Sentiment) -> Vec<&'a Preference> {
    prefs
        .iter()
        .filter(|p| p.sentiment == sentiment && p.is_relevant_to(attrs))
        .collect()
}

/// Item attributes no statement mentions; all of them when every one is covered.
fn uncovered(prefs: &[Preference], attrs: &BTreeSet<String>) -> BTreeSet<String> {
    let missing: BTreeSet<String> = attrs
        .iter()
        .filter(|a| {
            let one = BTreeSet::from([(*a).clone()]);
            !prefs.iter().any(|p| p.is_relevant_to(&one))
        })
        .cloned()
        .collect();
    if missing.is_empty() {
        attrs.clone()
    } else {
        missing
    }
}

fn decide(text: &str) -> String {
    let prefs = profile_of(text);
    let attrs = genres_of(text, prompts::CANDIDATE_ITEM);
    let pos = relevant(&prefs, &attrs, Sentiment::Positive);
    let neg = relevant(&prefs, &attrs, Sentiment::Negative);
    let decision = if let Some(n) = neg.first() {
        Decision {
            interact: false,
            rationale: format!("It conflicts with a stated aversion to {}.", topics_phrase(&n.topics)),
            exit: false,
        }
    } else if let Some(p) = pos.first() {
        Decision {
            interact: true,
            rationale: format!("It matches a stated interest in {}.", topics_phrase(&p.topics)),
            exit: false,
        }
    } else {
        Decision {
            interact: false,
            rationale: format!("The profile shows no interest in {}.", topics_phrase(&attrs)),
            exit: false,
        }
    };
    render_decision(&decision)
}

struct CaseView {
    attrs: BTreeSet<String>,
    label: DefectLabel,
}

fn cases_of(text: &str) -> Vec<CaseView> {
    prompts::case_blocks(text)
        .into_iter()
        .map(|block| CaseView {
            attrs: genres_in(&block),
            label: field(&block, "Diagnosis")
                .and_then(DefectLabel::from_utterance)
                .unwrap_or(DefectLabel::Incomplete),
        })
        .collect()
}

fn reasons(text: &str) -> String {
    let prefs = profile_of(text);
    let lines: Vec<String> = cases_of(text)
        .iter()
        .map(|c| {
            let neg: BTreeSet<String> = relevant(&prefs, &c.attrs, Sentiment::Negative)
                .iter()
                .flat_map(|p| p.topics.iter().cloned())
                .collect();
            match c.label {
                DefectLabel::Inaccurate => format!(
                    "The profile states an aversion to {} that contradicts the user's real interest in this item.",
                    topics_phrase(&neg)
                ),
                DefectLabel::Incomplete => format!(
                    "The profile has no preference covering {}, so it cannot explain the interaction.",
                    topics_phrase(&c.attrs)
                ),
                DefectLabel::InaccurateAndIncomplete => format!(
                    "The profile states an aversion to {} and lacks a positive preference covering {}.",
                    topics_phrase(&neg),
                    topics_phrase(&c.attrs)
                ),
            }
        })
        .collect();
    parse::render(&parse::Payload::Reasons(lines))
}

fn suggest(text: &str) -> String {
    let prefs = profile_of(text);
    let mut out: Vec<Suggestion> = Vec::new();
    for (i, c) in cases_of(text).iter().enumerate() {
        let case = Some(i + 1);
        let fixes = |out: &mut Vec<Suggestion>| {
            let neg = relevant(&prefs, &c.attrs, Sentiment::Negative);
            if neg.is_empty() {
                out.push(Suggestion::new(
                    SuggestionKind::Correct,
                    &c.attrs,
                    treatment::correct_text(&c.attrs),
                    case,
                ));
            }
            for n in neg {
                out.push(Suggestion::new(
                    SuggestionKind::Correct,
                    &n.topics,
                    treatment::correct_text(&n.topics),
                    case,
                ));
            }
        };
        let add = |out: &mut Vec<Suggestion>| {
            let topics = uncovered(&prefs, &c.attrs);
            out.push(Suggestion::new(SuggestionKind::Add, &topics, treatment::add_text(&topics), case));
        };
        match c.label {
            DefectLabel::Inaccurate => fixes(&mut out),
            DefectLabel::Incomplete => add(&mut out),
            DefectLabel::InaccurateAndIncomplete => {
                fixes(&mut out);
                add(&mut out);
            }
        }
    }
    parse::render(&parse::Payload::Suggestions(out))
}

fn refine(text: &str) -> String {
    let prefs = profile_of(text);
    let suggestions = section(text, prompts::SUGGESTIONS)
        .map(|lines| parse::parse_suggestions(&lines.join("\n")).unwrap_or_default())
        .unwrap_or_default();
    parse::render(&parse::Payload::Profile(apply_suggestions(&prefs, &suggestions)))
}

fn update(text: &str) -> String {
    let mut prefs = profile_of(text);
    let attrs = genres_of(text, prompts::INTERACTED_ITEM);
    let has_pos = !relevant(&prefs, &attrs, Sentiment::Positive).is_empty();
    if let Some(p) = prefs
        .iter_mut()
        .find(|p| p.sentiment == Sentiment::Negative && p.is_relevant_to(&attrs))
    {
        p.sentiment = Sentiment::Positive;
        p.text = treatment::correct_text(&p.topics);
    } else if !has_pos && !attrs.is_empty() {
        let topics = uncovered(&prefs, &attrs);
        prefs.push(Preference::positive(&topics, treatment::add_text(&topics)));
    }
    parse::render(&parse::Payload::Profile(prefs))
}

fn init_profile(text: &str) -> String {
    let lines = section(text, prompts::HISTORY).unwrap_or_default();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in &lines {
        let Some((head, _rating)) = line.rsplit_once(" | rating: ") else {
            continue;
        };
        let Some((_title, genres)) = head.rsplit_once(" | genres: ") else {
            continue;
        };
        let unique: BTreeSet<&str> = profile::split_topics(genres).collect();
        for g in unique {
            *counts.entry(g.to_string()).or_default() += 1;
        }
    }
    let n = lines.len().max(1) as f64;
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c as f64 / n >= INIT_SHARE)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let prefs: Vec<Preference> = ranked
        .into_iter()
        .map(|(g, _)| Preference::positive([g.as_str()], format!("Enjoys {g}")))
        .collect();
    parse::render(&parse::Payload::Profile(prefs))
}
