//! Three-step treatment: infer reasons, generate suggestions, refine.
//!
//! A batch of discrepancy cases is treated jointly: one call per step, with
//! per-case attribution carried on reasons and suggestions.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backend::{self, parse, Backend};
use crate::defects::DefectLabel;
use crate::error::{Error, ParseError, Result};
use crate::profile::{self, join_topics, Cause, Preference, Provenance, Sentiment, UserProfile};
use crate::prompts;
use crate::simulator::DiscrepancyCase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuggestionKind {
    Add,
    Correct,
}

impl SuggestionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SuggestionKind::Add => "add",
            SuggestionKind::Correct => "correct",
        }
    }

    pub fn fits(self, label: DefectLabel) -> bool {
        matches!(
            (self, label),
            (SuggestionKind::Add, DefectLabel::Incomplete)
                | (SuggestionKind::Correct, DefectLabel::Inaccurate)
                | (_, DefectLabel::InaccurateAndIncomplete)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub kind: SuggestionKind,
    pub topics: BTreeSet<String>,
    pub text: String,
    /// 1-based index of the case this suggestion answers.
    pub case: Option<usize>,
}

impl Suggestion {
    pub fn new<I, S>(kind: SuggestionKind, topics: I, text: impl AsRef<str>, case: Option<usize>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let pref = Preference::positive(topics, text);
        Self {
            kind,
            topics: pref.topics,
            text: pref.text,
            case,
        }
    }

    pub fn render_line(&self, n: usize) -> String {
        let case = self.case.map(|c| format!(" (case {c})")).unwrap_or_default();
        format!(
            "Suggestion {n}: {} [{}]{case}: {}",
            self.kind.as_str(),
            join_topics(&self.topics),
            self.text
        )
    }
}

pub fn add_text(topics: &BTreeSet<String>) -> String {
    format!("Interested in {}", join_topics(topics).replace("; ", " and "))
}

pub fn correct_text(topics: &BTreeSet<String>) -> String {
    format!("Have a high interest in {}", join_topics(topics).replace("; ", " and "))
}

fn lower_set(topics: &BTreeSet<String>) -> BTreeSet<String> {
    topics.iter().map(|t| t.to_lowercase()).collect()
}

/// Apply suggestions in order; later ones see earlier edits.
///
/// `add` appends a positive statement unless one with the same topics exists.
/// `correct` turns every negative statement sharing a topic into a positive one
/// with the suggested wording, or adds the statement when nothing matches.
pub fn apply_suggestions(prefs: &[Preference], suggestions: &[Suggestion]) -> Vec<Preference> {
    let mut out = prefs.to_vec();
    for s in suggestions {
        match s.kind {
            SuggestionKind::Add => {
                let key = lower_set(&s.topics);
                let exists = out
                    .iter()
                    .any(|p| p.sentiment == Sentiment::Positive && lower_set(&p.topics) == key);
                if !exists {
                    out.push(Preference::positive(&s.topics, &s.text));
                }
            }
            SuggestionKind::Correct => {
                let mut hit = false;
                for p in out.iter_mut() {
                    if p.sentiment == Sentiment::Negative && p.is_relevant_to(&s.topics) {
                        p.sentiment = Sentiment::Positive;
                        p.text = s.text.clone();
                        hit = true;
                    }
                }
                if !hit {
                    out.push(Preference::positive(&s.topics, &s.text));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reason {
    /// 1-based case index within the batch.
    pub case: usize,
    pub label: DefectLabel,
    pub explanation: String,
}

pub fn infer_reason(
    profile: &UserProfile,
    cases: &[DiscrepancyCase],
    labels: &[DefectLabel],
    backend: &dyn Backend,
    reprompts: u32,
) -> Result<Vec<Reason>> {
    check_batch(cases, labels)?;
    let request = prompts::infer_reason(profile, cases, labels);
    let parsed = backend::ask(backend, &request, reprompts, |text| {
        let reasons = parse::parse_reasons(text)?;
        if reasons.len() != cases.len() {
            return Err(ParseError::Invalid {
                hint: "reason",
                reason: format!("{} reasons for {} cases", reasons.len(), cases.len()),
            });
        }
        Ok(reasons)
    })?;
    Ok(parsed
        .value
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (explanation, &label))| Reason {
            case: i + 1,
            label,
            explanation,
        })
        .collect())
}

fn check_batch(cases: &[DiscrepancyCase], labels: &[DefectLabel]) -> Result<()> {
    if cases.is_empty() || cases.len() != labels.len() {
        return Err(Error::Precondition(format!(
            "{} cases with {} labels",
            cases.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Kinds must fit each attributed case's label, and a combined-label case
/// needs both kinds.
pub fn validate_suggestions(suggestions: &[Suggestion], labels: &[DefectLabel]) -> Result<(), String> {
    if suggestions.is_empty() {
        return Err("empty suggestion list".into());
    }
    for s in suggestions {
        if let Some(c) = s.case {
            let label = labels
                .get(c.wrapping_sub(1))
                .ok_or_else(|| format!("suggestion names unknown case {c}"))?;
            if !s.kind.fits(*label) {
                return Err(format!("{} suggestion for a case diagnosed {label}", s.kind.as_str()));
            }
        }
    }
    for (i, label) in labels.iter().enumerate() {
        if *label == DefectLabel::InaccurateAndIncomplete {
            let kinds: BTreeSet<&str> = suggestions
                .iter()
                .filter(|s| s.case == Some(i + 1))
                .map(|s| s.kind.as_str())
                .collect();
            if !kinds.is_empty() && kinds.len() < 2 {
                return Err(format!("case {} needs both add and correct suggestions", i + 1));
            }
        }
    }
    Ok(())
}

pub fn gen_suggestions(
    profile: &UserProfile,
    cases: &[DiscrepancyCase],
    labels: &[DefectLabel],
    reasons: &[Reason],
    backend: &dyn Backend,
    reprompts: u32,
) -> Result<Vec<Suggestion>> {
    check_batch(cases, labels)?;
    if reasons.len() != cases.len() {
        return Err(Error::Precondition("one reason per case required".into()));
    }
    let request = prompts::suggest(profile, cases, labels, reasons);
    let parsed = backend::ask(backend, &request, reprompts, |text| {
        let suggestions = parse::parse_suggestions(text)?;
        validate_suggestions(&suggestions, labels).map_err(|reason| ParseError::Invalid {
            hint: "suggestions",
            reason,
        })?;
        Ok(suggestions)
    })?;
    Ok(parsed.value)
}

/// Put back statements no suggestion touches, verbatim, if the backend
/// dropped or rephrased them. Returns how many were restored.
fn pin_untouched(old: &[Preference], new: &mut Vec<Preference>, suggestions: &[Suggestion]) -> usize {
    let mut restored = 0;
    for (idx, o) in old.iter().enumerate() {
        let touched = suggestions.iter().any(|s| profile::topics_intersect(&o.topics, &s.topics));
        if touched || new.contains(o) {
            continue;
        }
        let rephrased = new
            .iter()
            .position(|n| n.sentiment == o.sentiment && n.topics == o.topics && !old.contains(n));
        match rephrased {
            Some(pos) => new[pos] = o.clone(),
            None => new.insert(idx.min(new.len()), o.clone()),
        }
        restored += 1;
    }
    restored
}

pub fn refine(
    profile: &UserProfile,
    suggestions: &[Suggestion],
    iteration: u32,
    forbidden_titles: &[&str],
    backend: &dyn Backend,
    reprompts: u32,
) -> Result<UserProfile> {
    if suggestions.is_empty() {
        return Err(Error::Precondition("refine needs at least one suggestion".into()));
    }
    let request = prompts::refine(profile, suggestions);
    let mut prefs = profile::ask_profile_guarded(backend, request, reprompts, forbidden_titles)?;
    let old: Vec<Preference> = profile.prefs().cloned().collect();
    let restored = pin_untouched(&old, &mut prefs, suggestions);
    if restored > 0 {
        log::warn!(
            "user {}: restored {restored} untouched statement(s) after refine",
            profile.user_id
        );
    }
    Ok(profile.successor(
        prefs,
        Provenance::Refined { iteration },
        Cause::Refine { iteration },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Treatment {
    pub reasons: Vec<Reason>,
    pub suggestions: Vec<Suggestion>,
    pub profile: UserProfile,
}

/// Run the three steps for one batch.
pub fn treat(
    profile: &UserProfile,
    cases: &[DiscrepancyCase],
    labels: &[DefectLabel],
    iteration: u32,
    backend: &dyn Backend,
    reprompts: u32,
) -> Result<Treatment> {
    let reasons = infer_reason(profile, cases, labels, backend, reprompts)?;
    let suggestions = gen_suggestions(profile, cases, labels, &reasons, backend, reprompts)?;
    let titles: Vec<&str> = cases.iter().map(|c| c.item.title.as_str()).collect();
    let refined = refine(profile, &suggestions, iteration, &titles, backend, reprompts)?;
    Ok(Treatment {
        reasons,
        suggestions,
        profile: refined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, ScriptedBackend};
    use crate::catalog::Item;
    use crate::diagnosis::oracle_diagnose;
    use crate::simulator::{decide, Behavior, Source};

    fn case(title: &str, attrs: &[&str]) -> DiscrepancyCase {
        DiscrepancyCase {
            item: Item::new(1, "1", title, attrs.iter().copied()),
            rating: 5,
            simulated: Behavior {
                interact: false,
                rationale: "No stated interest.".into(),
                source: Source::Simulated,
            },
            real: Behavior::observed(),
            position: 0,
        }
    }

    #[test]
    fn munich_case_adds_missing_genre() {
        let mock = MockBackend::new(0);
        let p = UserProfile::new(
            "u",
            vec![Preference::positive(["Literature & Fiction"], "Enjoys literary fiction")],
        );
        let c = case("Munich, 1938: Appeasement and World War II", &["Politics & Social Sciences"]);
        let label = oracle_diagnose(&p, &c).label;
        assert_eq!(label, DefectLabel::Incomplete);
        let t = treat(&p, std::slice::from_ref(&c), &[label], 1, &mock, 0).unwrap();
        assert!(t.reasons[0].explanation.contains("Politics & Social Sciences"));
        assert_eq!(t.suggestions.len(), 1);
        assert_eq!(t.suggestions[0].kind, SuggestionKind::Add);
        assert!(t.suggestions[0].topics.contains("Politics & Social Sciences"));
        assert_eq!(t.profile.version, 1);
        assert_eq!(t.profile.statements[0], p.statements[0]);
        assert!(decide(&t.profile, &c.item, &mock, 0).unwrap().interact);
        assert!(!profile::render_prose(&t.profile).contains(&c.item.title));
    }

    #[test]
    fn folk_tales_correction() {
        let mock = MockBackend::new(0);
        let p = UserProfile::new(
            "u",
            vec![
                Preference::negative(["Folk Tales & Myths"], "Disinterested in Folk Tales & Myths"),
                Preference::positive(["Folk Tales & Myths", "Fairy Tales"], "Enjoys fairy tales"),
            ],
        );
        let c = case("Sleeping Beauty", &["Folk Tales & Myths"]);
        let label = oracle_diagnose(&p, &c).label;
        assert_eq!(label, DefectLabel::Inaccurate);
        let t = treat(&p, std::slice::from_ref(&c), &[label], 1, &mock, 0).unwrap();
        assert!(t.suggestions.iter().all(|s| s.kind == SuggestionKind::Correct));
        assert_eq!(t.profile.statements[0].pref.text, "Have a high interest in Folk Tales & Myths");
        assert_eq!(t.profile.statements[0].pref.sentiment, Sentiment::Positive);
    }

    #[test]
    fn both_label_gets_both_kinds() {
        let mock = MockBackend::new(0);
        let p = UserProfile::new(
            "u",
            vec![
                Preference::negative(["Mystery"], "Only moderate interest in mysteries"),
                Preference::negative(["Cozy"], "Finds cozy stories dull"),
            ],
        );
        let c = case("How Far is Heaven?", &["Mystery", "Cozy", "Character-Driven"]);
        let label = oracle_diagnose(&p, &c).label;
        assert_eq!(label, DefectLabel::InaccurateAndIncomplete);
        let reasons = infer_reason(&p, std::slice::from_ref(&c), &[label], &mock, 0).unwrap();
        let s = gen_suggestions(&p, std::slice::from_ref(&c), &[label], &reasons, &mock, 0).unwrap();
        assert!(s.len() >= 2);
        let kinds: BTreeSet<_> = s.iter().map(|x| x.kind).collect();
        assert_eq!(kinds.len(), 2);
    }

    #[test]
    fn empty_suggestions_rejected() {
        let p = UserProfile::new("u", vec![]);
        let err = refine(&p, &[], 1, &[], &MockBackend::new(0), 0).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn empty_reason_text_is_a_parse_failure() {
        let b = ScriptedBackend::new(["   "]);
        let p = UserProfile::new("u", vec![]);
        let c = case("X", &["Drama"]);
        let err = infer_reason(&p, &[c], &[DefectLabel::Incomplete], &b, 0).unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
    }

    #[test]
    fn untouched_statements_pinned() {
        let p = UserProfile::new(
            "u",
            vec![
                Preference::positive(["Drama"], "Enjoys character drama"),
                Preference::negative(["Horror"], "Avoids gore"),
            ],
        );
        // backend rewrites the untouched Drama line and applies the correction
        let reply = "Profile:\n- positive [Drama]: Likes drama\n- positive [Horror]: Have a high interest in Horror";
        let b = ScriptedBackend::new([reply]);
        let s = vec![Suggestion::new(SuggestionKind::Correct, ["Horror"], "Have a high interest in Horror", Some(1))];
        let out = refine(&p, &s, 1, &[], &b, 0).unwrap();
        assert_eq!(out.statements[0], p.statements[0]);
        assert_eq!(out.statements[1].pref.text, "Have a high interest in Horror");
    }

    #[test]
    fn suggestion_validation() {
        let add = Suggestion::new(SuggestionKind::Add, ["A"], "x", Some(1));
        let fix = Suggestion::new(SuggestionKind::Correct, ["A"], "y", Some(1));
        assert!(validate_suggestions(std::slice::from_ref(&add), &[DefectLabel::Incomplete]).is_ok());
        assert!(validate_suggestions(std::slice::from_ref(&fix), &[DefectLabel::Incomplete]).is_err());
        assert!(validate_suggestions(std::slice::from_ref(&add), &[DefectLabel::InaccurateAndIncomplete]).is_err());
        assert!(validate_suggestions(&[add, fix], &[DefectLabel::InaccurateAndIncomplete]).is_ok());
        assert!(validate_suggestions(&[], &[DefectLabel::Incomplete]).is_err());
    }
}
