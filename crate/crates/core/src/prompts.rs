//! Prompt construction.
//!
//! Every prompt is plain text made of labelled sections (`User profile:`,
//! `Candidate item:`, `Case 1:` ...). Section bodies end at a blank line. The
//! rule-based mock backend reads the same sections back, so the prompt text
//! is the only channel between the pipeline and any backend.

use crate::backend::{ChatRequest, Message, SchemaHint};
use crate::catalog::{Item, RatedItem};
use crate::defects::DefectLabel;
use crate::profile::{self, join_topics, PreferenceStatement, UserProfile};
use crate::simulator::DiscrepancyCase;
use crate::treatment::{Reason, Suggestion};

/// Bumped whenever an asset or section layout changes.
pub const PROMPT_VERSION: &str = "1";

pub const SIMULATOR_SYSTEM: &str = include_str!("../assets/prompts/simulator_system.txt");
pub const INIT_PROFILE: &str = include_str!("../assets/prompts/init_profile.txt");
pub const DECIDE: &str = include_str!("../assets/prompts/decide.txt");
pub const DIAGNOSIS_SYSTEM: &str = include_str!("../assets/prompts/diagnosis_system.txt");
pub const DIAGNOSIS_INSTRUCTION: &str = include_str!("../assets/prompts/diagnosis_instruction.txt");
pub const TREAT_REASON: &str = include_str!("../assets/prompts/treat_reason.txt");
pub const TREAT_SUGGEST: &str = include_str!("../assets/prompts/treat_suggest.txt");
pub const TREAT_REFINE: &str = include_str!("../assets/prompts/treat_refine.txt");
pub const UPDATE_PROFILE: &str = include_str!("../assets/prompts/update_profile.txt");

pub const USER_PROFILE: &str = "User profile:";
pub const CANDIDATE_ITEM: &str = "Candidate item:";
pub const TARGET_ITEM: &str = "Target item:";
pub const INTERACTED_ITEM: &str = "Interacted item:";
pub const HISTORY: &str = "Interaction history:";
pub const SUGGESTIONS: &str = "Suggestions:";

pub mod task {
    pub const INIT_PROFILE: &str = "init-profile";
    pub const DECIDE: &str = "decide";
    pub const INFER_REASON: &str = "infer-reason";
    pub const SUGGEST: &str = "suggest";
    pub const REFINE: &str = "refine";
    pub const UPDATE_PROFILE: &str = "update-profile";
}

/// The `Task:` tag on the first line, if any.
pub fn task_of(text: &str) -> Option<&str> {
    text.lines().next()?.strip_prefix("Task:").map(str::trim)
}

/// Lines following a line equal to `header`, up to the next blank line.
pub fn section<'a>(text: &'a str, header: &str) -> Option<Vec<&'a str>> {
    let mut lines = text.lines();
    lines.by_ref().find(|l| l.trim() == header)?;
    Some(lines.take_while(|l| !l.trim().is_empty()).collect())
}

/// Value of a `Key: value` line.
pub fn field<'a>(lines: &[&'a str], key: &str) -> Option<&'a str> {
    lines
        .iter()
        .find_map(|l| l.trim().strip_prefix(key)?.strip_prefix(':').map(str::trim))
}

/// Bodies of `Case N:` blocks in order.
pub fn case_blocks(text: &str) -> Vec<Vec<&str>> {
    let mut blocks = Vec::new();
    let mut lines = text.lines().peekable();
    while let Some(line) = lines.next() {
        let t = line.trim();
        if t.starts_with("Case ") && t.ends_with(':') {
            let mut body = Vec::new();
            while let Some(l) = lines.peek() {
                if l.trim().is_empty() {
                    break;
                }
                body.push(*l);
                lines.next();
            }
            blocks.push(body);
        }
    }
    blocks
}

fn task_header(task: &str) -> String {
    format!("Task: {task}\n")
}

fn profile_section(statements: &[PreferenceStatement]) -> String {
    format!(
        "{USER_PROFILE}\n{}\n",
        profile::render_prefs(statements.iter().map(|s| &s.pref))
    )
}

fn item_lines(item: &Item) -> String {
    format!("Title: {}\nGenres: {}\n", item.title, join_topics(&item.attributes))
}

fn request(system: &str, user: String, hint: SchemaHint) -> ChatRequest {
    ChatRequest::new(vec![Message::system(system.trim_end()), Message::user(user)], Some(hint))
}

pub fn history_line(r: &RatedItem<'_>) -> String {
    format!(
        "- {} | genres: {} | rating: {}",
        r.item.title,
        join_topics(&r.item.attributes),
        r.rating
    )
}

pub fn init_profile(d_ini: &[RatedItem<'_>]) -> ChatRequest {
    let history: Vec<String> = d_ini.iter().map(history_line).collect();
    let user = format!(
        "{}{}\n{HISTORY}\n{}\n",
        task_header(task::INIT_PROFILE),
        INIT_PROFILE,
        history.join("\n")
    );
    request(SIMULATOR_SYSTEM, user, SchemaHint::Profile)
}

pub fn decide(profile: &UserProfile, item: &Item) -> ChatRequest {
    let user = format!(
        "{}{}\n{}\n{CANDIDATE_ITEM}\n{}",
        task_header(task::DECIDE),
        DECIDE,
        profile_section(&profile.statements),
        item_lines(item)
    );
    request(SIMULATOR_SYSTEM, user, SchemaHint::Decision)
}

/// The Input part of a diagnosis prompt; shared with the fine-tuning corpus.
pub fn diagnostic_input(statements: &[PreferenceStatement], case: &DiscrepancyCase) -> String {
    format!(
        "{}\n{TARGET_ITEM}\n{}Rating: {}/5\n\nReal behavior: interacted\nSimulated behavior: declined",
        profile_section(statements),
        item_lines(&case.item),
        case.rating
    )
}

pub fn diagnosis_user_message(input: &str) -> String {
    format!("{}\n{}", DIAGNOSIS_INSTRUCTION.trim_end(), input)
}

pub fn diagnose(statements: &[PreferenceStatement], case: &DiscrepancyCase) -> ChatRequest {
    let user = diagnosis_user_message(&diagnostic_input(statements, case));
    request(DIAGNOSIS_SYSTEM, user, SchemaHint::Diagnosis)
}

fn case_block(index: usize, case: &DiscrepancyCase, label: DefectLabel, reason: Option<&Reason>) -> String {
    let mut s = format!(
        "Case {index}:\n{}Rating: {}/5\nSimulator reason: {}\nDiagnosis: {}\n",
        item_lines(&case.item),
        case.rating,
        profile::clean_text(&case.simulated.rationale),
        label.utterance()
    );
    if let Some(r) = reason {
        s.push_str(&format!("Reason: {}\n", profile::clean_text(&r.explanation)));
    }
    s
}

fn cases_text(cases: &[DiscrepancyCase], labels: &[DefectLabel], reasons: Option<&[Reason]>) -> String {
    cases
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (c, l))| case_block(i + 1, c, *l, reasons.map(|r| &r[i])))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn infer_reason(profile: &UserProfile, cases: &[DiscrepancyCase], labels: &[DefectLabel]) -> ChatRequest {
    let user = format!(
        "{}{}\n{}\n{}",
        task_header(task::INFER_REASON),
        TREAT_REASON,
        profile_section(&profile.statements),
        cases_text(cases, labels, None)
    );
    request(SIMULATOR_SYSTEM, user, SchemaHint::Reason)
}

pub fn suggest(
    profile: &UserProfile,
    cases: &[DiscrepancyCase],
    labels: &[DefectLabel],
    reasons: &[Reason],
) -> ChatRequest {
    let user = format!(
        "{}{}\n{}\n{}",
        task_header(task::SUGGEST),
        TREAT_SUGGEST,
        profile_section(&profile.statements),
        cases_text(cases, labels, Some(reasons))
    );
    request(SIMULATOR_SYSTEM, user, SchemaHint::Suggestions)
}

pub fn refine(profile: &UserProfile, suggestions: &[Suggestion]) -> ChatRequest {
    let lines: Vec<String> = suggestions
        .iter()
        .enumerate()
        .map(|(i, s)| s.render_line(i + 1))
        .collect();
    let user = format!(
        "{}{}\n{}\n{SUGGESTIONS}\n{}\n",
        task_header(task::REFINE),
        TREAT_REFINE,
        profile_section(&profile.statements),
        lines.join("\n")
    );
    request(SIMULATOR_SYSTEM, user, SchemaHint::Profile)
}

pub fn update_profile(profile: &UserProfile, item: &Item) -> ChatRequest {
    let user = format!(
        "{}{}\n{}\n{INTERACTED_ITEM}\n{}",
        task_header(task::UPDATE_PROFILE),
        UPDATE_PROFILE,
        profile_section(&profile.statements),
        item_lines(item)
    );
    request(SIMULATOR_SYSTEM, user, SchemaHint::Profile)
}
