//! Labelled key/value payloads and their canonical renderings.
//!
//! Parsers look for the first well-formed payload of the requested kind and
//! tolerate prose around it. They return [`ParseError`] rather than guessing.

use serde::{Deserialize, Serialize};

use super::SchemaHint;
use crate::defects::DefectLabel;
use crate::error::ParseError;
use crate::profile::{self, Preference};
use crate::treatment::{Suggestion, SuggestionKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub interact: bool,
    pub rationale: String,
    /// The simulator asked to leave the session.
    #[serde(default)]
    pub exit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Decision(Decision),
    Diagnosis(DefectLabel),
    Reasons(Vec<String>),
    Suggestions(Vec<Suggestion>),
    Profile(Vec<Preference>),
}

pub fn parse_structured(text: &str, hint: SchemaHint) -> Result<Payload, ParseError> {
    Ok(match hint {
        SchemaHint::Decision => Payload::Decision(parse_decision(text)?),
        SchemaHint::Diagnosis => Payload::Diagnosis(parse_label(text)?),
        SchemaHint::Reason => Payload::Reasons(parse_reasons(text)?),
        SchemaHint::Suggestions => Payload::Suggestions(parse_suggestions(text)?),
        SchemaHint::Profile => Payload::Profile(parse_profile(text)?),
    })
}

pub fn render(payload: &Payload) -> String {
    match payload {
        Payload::Decision(d) => render_decision(d),
        Payload::Diagnosis(l) => format!("Label: {}", l.utterance()),
        Payload::Reasons(rs) => rs
            .iter()
            .enumerate()
            .map(|(i, r)| format!("Reason {}: {}", i + 1, profile::clean_text(r)))
            .collect::<Vec<_>>()
            .join("\n"),
        Payload::Suggestions(ss) => ss
            .iter()
            .enumerate()
            .map(|(i, s)| s.render_line(i + 1))
            .collect::<Vec<_>>()
            .join("\n"),
        Payload::Profile(prefs) => format!("Profile:\n{}", profile::render_prefs(prefs)),
    }
}

pub fn render_decision(d: &Decision) -> String {
    let word = if d.exit {
        "exit"
    } else if d.interact {
        "yes"
    } else {
        "no"
    };
    format!("Decision: {word}\nReason: {}", profile::clean_text(&d.rationale))
}

/// Find `key:` case-insensitively at a word boundary; returns the text after the colon.
fn after_key<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    let lower = text.to_ascii_lowercase();
    let needle = format!("{}:", key.to_ascii_lowercase());
    let mut from = 0;
    while let Some(pos) = lower[from..].find(&needle) {
        let at = from + pos;
        let boundary = at == 0 || !lower.as_bytes()[at - 1].is_ascii_alphanumeric();
        if boundary {
            return Some(&text[at + needle.len()..]);
        }
        from = at + needle.len();
    }
    None
}

fn first_line(s: &str) -> &str {
    s.lines().next().unwrap_or("").trim()
}

pub fn parse_decision(text: &str) -> Result<Decision, ParseError> {
    const HINT: &str = "decision";
    let value = after_key(text, "decision").ok_or(ParseError::NotFound(HINT))?;
    let word: String = value
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase();
    let (interact, exit) = match word.as_str() {
        "yes" | "true" | "interact" | "click" | "1" => (true, false),
        "no" | "false" | "skip" | "decline" | "0" => (false, false),
        "exit" | "leave" => (false, true),
        "" => return Err(ParseError::NotFound(HINT)),
        other => {
            return Err(ParseError::Invalid {
                hint: HINT,
                reason: format!("unrecognised decision {other:?}"),
            })
        }
    };
    let rationale = after_key(text, "reason")
        .or_else(|| after_key(text, "rationale"))
        .map(first_line)
        .unwrap_or("");
    if rationale.is_empty() {
        return Err(ParseError::Invalid {
            hint: HINT,
            reason: "missing rationale".into(),
        });
    }
    Ok(Decision {
        interact,
        rationale: rationale.to_string(),
        exit,
    })
}

pub fn parse_label(text: &str) -> Result<DefectLabel, ParseError> {
    for key in ["label", "defect type", "diagnosis"] {
        if let Some(value) = after_key(text, key) {
            return DefectLabel::from_utterance(first_line(value)).ok_or_else(|| ParseError::Invalid {
                hint: "diagnosis",
                reason: format!("unknown label {:?}", first_line(value)),
            });
        }
    }
    // a bare label utterance, as the fine-tuned diagnoser emits
    DefectLabel::from_utterance(text.trim()).ok_or(ParseError::NotFound("diagnosis"))
}

pub fn parse_reasons(text: &str) -> Result<Vec<String>, ParseError> {
    let mut reasons: Vec<String> = Vec::new();
    for line in text.lines().map(str::trim) {
        let Some(rest) = strip_numbered_key(line, "reason") else {
            continue;
        };
        reasons.push(rest.to_string());
    }
    if reasons.is_empty() {
        return Err(ParseError::NotFound("reason"));
    }
    if reasons.iter().any(|r| r.is_empty()) {
        return Err(ParseError::Invalid {
            hint: "reason",
            reason: "empty explanation".into(),
        });
    }
    Ok(reasons)
}

/// `Key:` or `Key N:` at line start, case-insensitive; returns the trimmed rest.
fn strip_numbered_key<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let line = line.trim_start_matches(['*', '#', ' ']);
    if line.len() < key.len() || !line[..key.len()].eq_ignore_ascii_case(key) {
        return None;
    }
    let rest = line[key.len()..].trim_start();
    let rest = rest.trim_start_matches(|c: char| c.is_ascii_digit());
    rest.strip_prefix(':').map(str::trim)
}

pub fn parse_suggestions(text: &str) -> Result<Vec<Suggestion>, ParseError> {
    let mut out = Vec::new();
    for line in text.lines() {
        let Some(rest) = strip_numbered_key(line.trim(), "suggestion") else {
            continue;
        };
        out.push(parse_suggestion_body(rest).ok_or_else(|| ParseError::Invalid {
            hint: "suggestions",
            reason: format!("unparseable suggestion {rest:?}"),
        })?);
    }
    if out.is_empty() {
        return Err(ParseError::NotFound("suggestions"));
    }
    Ok(out)
}

/// `<add|correct> [<topics>] (case N): <text>`
fn parse_suggestion_body(body: &str) -> Option<Suggestion> {
    let (word, rest) = body.split_once('[')?;
    let kind = match word.trim().to_ascii_lowercase().as_str() {
        "add" => SuggestionKind::Add,
        "correct" => SuggestionKind::Correct,
        _ => return None,
    };
    let (topics, rest) = rest.split_once(']')?;
    let mut rest = rest.trim_start();
    let mut case = None;
    if let Some(inner) = rest.strip_prefix("(case") {
        let (num, after) = inner.split_once(')')?;
        case = Some(num.trim().parse::<usize>().ok()?);
        rest = after.trim_start();
    }
    let text = rest.strip_prefix(':')?.trim();
    let s = Suggestion::new(kind, profile::split_topics(topics), text, case);
    (!s.topics.is_empty() && !s.text.is_empty()).then_some(s)
}

pub fn parse_profile(text: &str) -> Result<Vec<Preference>, ParseError> {
    let lines: Vec<&str> = text.lines().collect();
    let header = lines
        .iter()
        .position(|l| l.trim().eq_ignore_ascii_case("profile:") || l.trim().eq_ignore_ascii_case("updated profile:"));
    match header {
        Some(h) => {
            // statements run until the first blank line after the header
            let body = lines[h + 1..]
                .iter()
                .copied()
                .skip_while(|l| l.trim().is_empty())
                .take_while(|l| !l.trim().is_empty());
            Ok(profile::parse_profile_lines(body))
        }
        None => {
            let prefs: Vec<Preference> = lines
                .iter()
                .filter(|l| l.trim_start().starts_with("- "))
                .map(|l| Preference::parse_line(l).unwrap_or_else(|| profile::parse_profile_lines([*l]).remove(0)))
                .collect();
            if prefs.is_empty() {
                Err(ParseError::NotFound("profile"))
            } else {
                Ok(prefs)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decision_fixture() {
        let d = parse_decision("Decision: yes. Reason: matches thriller taste.").unwrap();
        assert_eq!(
            d,
            Decision {
                interact: true,
                rationale: "matches thriller taste.".into(),
                exit: false
            }
        );
    }

    #[test]
    fn label_fixture() {
        assert_eq!(parse_label("label: Incomplete").unwrap(), DefectLabel::Incomplete);
        assert_eq!(
            parse_label("After review.\nLabel: Inaccurate & Incomplete\n").unwrap(),
            DefectLabel::InaccurateAndIncomplete
        );
        assert_eq!(parse_label("Inaccurate").unwrap(), DefectLabel::Inaccurate);
        assert!(parse_label("label: broken").is_err());
        assert!(parse_label("the profile is fine").is_err());
    }

    #[test]
    fn empty_text_fails_for_every_hint() {
        for hint in [
            SchemaHint::Decision,
            SchemaHint::Diagnosis,
            SchemaHint::Reason,
            SchemaHint::Suggestions,
            SchemaHint::Profile,
        ] {
            assert!(parse_structured("", hint).is_err(), "{hint:?}");
        }
    }

    #[test]
    fn decision_needs_rationale() {
        assert!(matches!(
            parse_decision("Decision: no"),
            Err(ParseError::Invalid { .. })
        ));
        assert!(parse_decision("Decision: maybe\nReason: x").is_err());
    }

    #[test]
    fn profile_with_header_and_prose() {
        let text = "Here you go.\nProfile:\n- positive [Drama]: Enjoys drama\n\nHope this helps";
        let prefs = parse_profile(text).unwrap();
        assert_eq!(prefs, vec![Preference::positive(["Drama"], "Enjoys drama")]);
        assert_eq!(parse_profile("Profile:\nNo known preferences.").unwrap(), vec![]);
    }

    fn topic() -> impl Strategy<Value = String> {
        "[A-Z][a-z]{1,8}( & [A-Z][a-z]{1,6})?"
    }

    fn text() -> impl Strategy<Value = String> {
        "[A-Za-z][A-Za-z ,.'-]{0,40}[a-z.]".prop_map(|s| profile::clean_text(&s))
    }

    fn pref() -> impl Strategy<Value = Preference> {
        (any::<bool>(), prop::collection::btree_set(topic(), 1..4), text()).prop_map(|(pos, topics, text)| {
            if pos {
                Preference::positive(topics, text)
            } else {
                Preference::negative(topics, text)
            }
        })
    }

    fn suggestion() -> impl Strategy<Value = Suggestion> {
        (any::<bool>(), prop::collection::btree_set(topic(), 1..3), text(), prop::option::of(1usize..9)).prop_map(
            |(add, topics, text, case)| {
                let kind = if add { SuggestionKind::Add } else { SuggestionKind::Correct };
                Suggestion::new(kind, topics, text, case)
            },
        )
    }

    fn payload() -> impl Strategy<Value = (Payload, SchemaHint)> {
        prop_oneof![
            (any::<bool>(), any::<bool>(), text()).prop_map(|(interact, exit, rationale)| (
                Payload::Decision(Decision {
                    interact: interact && !exit,
                    rationale,
                    exit
                }),
                SchemaHint::Decision
            )),
            prop_oneof![
                Just(DefectLabel::Inaccurate),
                Just(DefectLabel::Incomplete),
                Just(DefectLabel::InaccurateAndIncomplete)
            ]
            .prop_map(|l| (Payload::Diagnosis(l), SchemaHint::Diagnosis)),
            prop::collection::vec(text(), 1..5).prop_map(|r| (Payload::Reasons(r), SchemaHint::Reason)),
            prop::collection::vec(suggestion(), 1..5).prop_map(|s| (Payload::Suggestions(s), SchemaHint::Suggestions)),
            prop::collection::vec(pref(), 0..6).prop_map(|p| (Payload::Profile(p), SchemaHint::Profile)),
        ]
    }

    proptest! {
        #[test]
        fn canonical_rendering_round_trips((payload, hint) in payload()) {
            let text = render(&payload);
            prop_assert_eq!(parse_structured(&text, hint).unwrap(), payload);
        }
    }
}
