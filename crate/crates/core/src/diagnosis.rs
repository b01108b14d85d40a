//! Defect diagnosis: a completion-backed diagnoser and a rule-based oracle.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backend::{self, parse, Backend};
use crate::defects::DefectLabel;
use crate::error::Result;
use crate::profile::{Preference, Sentiment, UserProfile};
use crate::prompts;
use crate::simulator::DiscrepancyCase;

pub const ORACLE_ID: &str = "rule-oracle";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub label: DefectLabel,
    pub backend_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    /// No relevant statement either way; the label is the default guess.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub weak_evidence: bool,
}

/// Inverse of the synthesis rules. A relevant negative statement is evidence
/// of inaccuracy; the absence of any relevant positive one is evidence of
/// incompleteness.
pub fn classify<'a>(
    prefs: impl IntoIterator<Item = &'a Preference>,
    attributes: &BTreeSet<String>,
) -> (DefectLabel, bool) {
    let mut negative = false;
    let mut positive = false;
    for p in prefs.into_iter().filter(|p| p.is_relevant_to(attributes)) {
        match p.sentiment {
            Sentiment::Negative => negative = true,
            Sentiment::Positive => positive = true,
        }
    }
    match (negative, !positive) {
        (true, true) => (DefectLabel::InaccurateAndIncomplete, false),
        (true, false) => (DefectLabel::Inaccurate, false),
        (false, true) => (DefectLabel::Incomplete, false),
        (false, false) => (DefectLabel::Incomplete, true),
    }
}

pub fn oracle_diagnose(profile: &UserProfile, case: &DiscrepancyCase) -> Diagnosis {
    let (label, weak_evidence) = classify(profile.prefs(), &case.item.attributes);
    Diagnosis {
        label,
        backend_id: ORACLE_ID.into(),
        raw_text: None,
        weak_evidence,
    }
}

pub fn diagnose(
    profile: &UserProfile,
    case: &DiscrepancyCase,
    backend: &dyn Backend,
    reprompts: u32,
) -> Result<Diagnosis> {
    let request = prompts::diagnose(&profile.statements, case);
    let parsed = backend::ask(backend, &request, reprompts, parse::parse_label)?;
    Ok(Diagnosis {
        label: parsed.value,
        backend_id: backend.id().to_string(),
        raw_text: Some(parsed.raw),
        weak_evidence: false,
    })
}

/// Which diagnoser an orchestration run uses.
#[derive(Clone)]
pub enum Diagnoser {
    Oracle,
    Backend(backend::BackendHandle),
}

impl Diagnoser {
    pub fn diagnose(&self, profile: &UserProfile, case: &DiscrepancyCase, reprompts: u32) -> Result<Diagnosis> {
        match self {
            Diagnoser::Oracle => Ok(oracle_diagnose(profile, case)),
            Diagnoser::Backend(b) => diagnose(profile, case, b.as_ref(), reprompts),
        }
    }

    pub fn id(&self) -> String {
        match self {
            Diagnoser::Oracle => ORACLE_ID.into(),
            Diagnoser::Backend(b) => b.id().to_string(),
        }
    }
}
