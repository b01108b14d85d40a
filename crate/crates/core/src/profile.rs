//! Structured user profiles.
//!
//! A profile is an ordered list of preference statements. The prose form
//! (one `- <sentiment> [<topics>]: <text>` line per statement) is what every
//! prompt shows and what every backend returns, so the same line grammar is
//! parsed back into statements after each LLM edit.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backend::{self, parse, Backend};
use crate::catalog::{Item, RatedItem};
use crate::error::{Error, Result};
use crate::prompts;

pub const EMPTY_PROFILE_LINE: &str = "No known preferences.";
pub const MISC_TOPIC: &str = "misc";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Negative,
}

impl Sentiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Positive => "positive",
            Sentiment::Negative => "negative",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Sentiment::Positive => Sentiment::Negative,
            Sentiment::Negative => Sentiment::Positive,
        }
    }
}

/// Content of a statement, independent of its identity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Preference {
    pub sentiment: Sentiment,
    pub topics: BTreeSet<String>,
    pub text: String,
}

impl Preference {
    pub fn new<I, S>(sentiment: Sentiment, topics: I, text: impl AsRef<str>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            sentiment,
            topics: topics
                .into_iter()
                .map(|t| clean_topic(t.as_ref()))
                .filter(|t| !t.is_empty())
                .collect(),
            text: clean_text(text.as_ref()),
        }
    }

    pub fn positive<I, S>(topics: I, text: impl AsRef<str>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self::new(Sentiment::Positive, topics, text)
    }

    pub fn negative<I, S>(topics: I, text: impl AsRef<str>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self::new(Sentiment::Negative, topics, text)
    }

    pub fn is_relevant_to(&self, attributes: &BTreeSet<String>) -> bool {
        topics_intersect(&self.topics, attributes)
    }

    pub fn render_line(&self) -> String {
        format!(
            "- {} [{}]: {}",
            self.sentiment.as_str(),
            join_topics(&self.topics),
            self.text
        )
    }

    /// Parse one `- <sentiment> [<topics>]: <text>` line.
    pub fn parse_line(line: &str) -> Option<Self> {
        let rest = line.trim().strip_prefix('-')?.trim_start();
        let (word, rest) = rest.split_once('[')?;
        let sentiment = match word.trim().to_ascii_lowercase().as_str() {
            "positive" | "+" | "likes" => Sentiment::Positive,
            "negative" | "-" | "dislikes" => Sentiment::Negative,
            _ => return None,
        };
        let (topics, rest) = rest.split_once(']')?;
        let text = rest.trim_start().strip_prefix(':')?.trim();
        let pref = Preference::new(sentiment, split_topics(topics), text);
        (!pref.topics.is_empty() && !pref.text.is_empty()).then_some(pref)
    }

    fn misc(line: &str) -> Self {
        let text = line.trim().trim_start_matches('-').trim();
        Preference::positive([MISC_TOPIC], text)
    }
}

/// Parse profile prose. Lines that look like statements but fail the grammar
/// are kept as single-topic `misc` statements.
pub fn parse_profile_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Vec<Preference> {
    lines
        .into_iter()
        .map(str::trim)
        .filter(|l| !l.is_empty() && *l != EMPTY_PROFILE_LINE)
        .map(|l| Preference::parse_line(l).unwrap_or_else(|| Preference::misc(l)))
        .collect()
}

pub fn clean_topic(raw: &str) -> String {
    collapse_ws(&raw.replace(['[', ']', ';', '|', '\n', '\r'], " "))
}

pub fn clean_text(raw: &str) -> String {
    collapse_ws(&raw.replace(['\n', '\r'], " "))
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn join_topics(topics: &BTreeSet<String>) -> String {
    topics.iter().map(String::as_str).collect::<Vec<_>>().join("; ")
}

pub fn split_topics(raw: &str) -> impl Iterator<Item = &str> {
    raw.split(';').map(str::trim).filter(|t| !t.is_empty())
}

/// Case-insensitive set intersection test.
pub fn topics_intersect(a: &BTreeSet<String>, b: &BTreeSet<String>) -> bool {
    let b: Vec<String> = b.iter().map(|y| y.to_lowercase()).collect();
    a.iter().any(|x| b.contains(&x.to_lowercase()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Initial,
    Refined { iteration: u32 },
    Arena { round: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceStatement {
    pub id: String,
    #[serde(flatten)]
    pub pref: Preference,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateStrategy {
    None,
    WithoutGt,
    WithGt,
}

impl UpdateStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateStrategy::None => "none",
            UpdateStrategy::WithoutGt => "without_gt",
            UpdateStrategy::WithGt => "with_gt",
        }
    }
}

impl fmt::Display for UpdateStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Why a profile version was superseded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Cause {
    Refine { iteration: u32 },
    Arena { round: u32, strategy: UpdateStrategy },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileSnapshot {
    pub version: u32,
    pub statements: Vec<PreferenceStatement>,
    pub cause: Cause,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub statements: Vec<PreferenceStatement>,
    pub version: u32,
    pub history: Vec<ProfileSnapshot>,
    next_id: u32,
}

impl UserProfile {
    pub fn new(user_id: impl Into<String>, prefs: Vec<Preference>) -> Self {
        let mut profile = Self {
            user_id: user_id.into(),
            statements: Vec::new(),
            version: 0,
            history: Vec::new(),
            next_id: 0,
        };
        profile.statements = prefs
            .into_iter()
            .map(|p| profile.mint(p, Provenance::Initial))
            .collect();
        profile
    }

    fn mint(&mut self, pref: Preference, provenance: Provenance) -> PreferenceStatement {
        self.next_id += 1;
        PreferenceStatement {
            id: format!("s{}", self.next_id),
            pref,
            provenance,
        }
    }

    pub fn prefs(&self) -> impl Iterator<Item = &Preference> {
        self.statements.iter().map(|s| &s.pref)
    }

    /// New version built from `prefs`. Statements whose content is unchanged
    /// keep their id and provenance; new content is minted with `provenance`.
    pub fn successor(&self, prefs: Vec<Preference>, provenance: Provenance, cause: Cause) -> Self {
        let mut next = self.clone();
        next.history.push(ProfileSnapshot {
            version: self.version,
            statements: self.statements.clone(),
            cause,
        });
        next.version += 1;
        let mut unused: Vec<Option<&PreferenceStatement>> = self.statements.iter().map(Some).collect();
        let mut statements = Vec::with_capacity(prefs.len());
        for pref in prefs {
            let reused = unused
                .iter_mut()
                .find(|slot| slot.is_some_and(|s| s.pref == pref))
                .and_then(Option::take);
            statements.push(match reused {
                Some(s) => s.clone(),
                None => next.mint(pref, provenance),
            });
        }
        next.statements = statements;
        next
    }

    pub fn len(&self) -> usize {
        self.statements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statements.is_empty()
    }
}

/// Canonical prose: one sentiment-labelled line per statement.
pub fn render_prose(profile: &UserProfile) -> String {
    render_prefs(profile.prefs())
}

pub fn render_prefs<'a>(prefs: impl IntoIterator<Item = &'a Preference>) -> String {
    let lines: Vec<String> = prefs.into_iter().map(Preference::render_line).collect();
    if lines.is_empty() {
        EMPTY_PROFILE_LINE.to_string()
    } else {
        lines.join("\n")
    }
}

pub fn relevant_statements<'a>(profile: &'a UserProfile, item: &Item) -> Vec<&'a PreferenceStatement> {
    profile
        .statements
        .iter()
        .filter(|s| s.pref.is_relevant_to(&item.attributes))
        .collect()
}

/// First title that appears verbatim in `rendered`.
pub fn leaked_title<'a>(rendered: &str, titles: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    titles
        .into_iter()
        .filter(|t| !t.trim().is_empty())
        .find(|t| rendered.contains(t))
}

pub fn init_profile(
    user_id: &str,
    d_ini: &[RatedItem<'_>],
    backend: &dyn Backend,
    reprompts: u32,
) -> Result<UserProfile> {
    if d_ini.is_empty() {
        return Err(Error::Precondition(format!("user {user_id}: empty initialization sequence")));
    }
    let request = prompts::init_profile(d_ini);
    let parsed = backend::ask(backend, &request, reprompts, parse::parse_profile)?;
    Ok(UserProfile::new(user_id, parsed.value))
}

/// Apply one arena update. Returns the profile unchanged when the strategy
/// does not fire this round.
#[allow(clippy::too_many_arguments)]
pub fn update_profile(
    profile: &UserProfile,
    strategy: UpdateStrategy,
    selected: Option<&Item>,
    gt: &Item,
    round: u32,
    backend: &dyn Backend,
    reprompts: u32,
) -> Result<UserProfile> {
    let item = match (strategy, selected) {
        (UpdateStrategy::None, _) | (UpdateStrategy::WithoutGt, None) => return Ok(profile.clone()),
        (UpdateStrategy::WithoutGt, Some(sel)) => sel,
        (UpdateStrategy::WithGt, _) => gt,
    };
    let request = prompts::update_profile(profile, item);
    let titles = [item.title.as_str()];
    let prefs = ask_profile_guarded(backend, request, reprompts, &titles)?;
    Ok(profile.successor(
        prefs,
        Provenance::Arena { round },
        Cause::Arena { round, strategy },
    ))
}

/// Ask for a profile and enforce the title-leak guard: one corrective
/// reprompt, then an error.
pub(crate) fn ask_profile_guarded(
    backend: &dyn Backend,
    mut request: backend::ChatRequest,
    reprompts: u32,
    titles: &[&str],
) -> Result<Vec<Preference>> {
    for attempt in 0..2 {
        let parsed = backend::ask(backend, &request, reprompts, parse::parse_profile)?;
        let rendered = render_prefs(&parsed.value);
        match leaked_title(&rendered, titles.iter().copied()) {
            None => return Ok(parsed.value),
            Some(title) if attempt == 0 => {
                request.messages.push(backend::Message::assistant(parsed.raw));
                request.messages.push(backend::Message::user(format!(
                    "The profile must describe general preferences and must not mention the item \"{title}\". Rewrite it without naming specific items."
                )));
            }
            Some(title) => {
                return Err(Error::Invariant(format!(
                    "refined profile mentions item title {title:?}"
                )))
            }
        }
    }
    unreachable!("loop returns on second attempt")
}
