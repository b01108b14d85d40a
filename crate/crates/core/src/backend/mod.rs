//! Completion backends.
//!
//! Every LLM-dependent role (simulator, diagnoser, treatment) talks to a
//! [`Backend`]. The remote backend speaks the OpenAI chat-completions wire
//! protocol; the mock backend is a deterministic rule-based policy that reads
//! the same prompts a remote model would see.

mod limit;
pub mod mock;
pub mod parse;
pub mod remote;
pub mod scripted;

use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{BackendError, Error, ParseError, Result};

pub use mock::MockBackend;
pub use parse::{parse_structured, render, Decision, Payload};
pub use remote::{RemoteBackend, RemoteConfig};
pub use scripted::{FnBackend, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Tag naming the structured payload a request expects back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemaHint {
    Decision,
    Diagnosis,
    Reason,
    Suggestions,
    Profile,
}

impl SchemaHint {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemaHint::Decision => "decision",
            SchemaHint::Diagnosis => "diagnosis",
            SchemaHint::Reason => "reason",
            SchemaHint::Suggestions => "suggestions",
            SchemaHint::Profile => "profile",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub hint: Option<SchemaHint>,
}

impl ChatRequest {
    pub const DEFAULT_MAX_TOKENS: u32 = 512;

    pub fn new(messages: Vec<Message>, hint: Option<SchemaHint>) -> Self {
        Self {
            messages,
            temperature: 0.0,
            max_tokens: Self::DEFAULT_MAX_TOKENS,
            hint,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::EmptyMessages);
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Concatenated text of all user messages; what rule-based policies read.
    pub fn user_text(&self) -> String {
        self.messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// First user message; reprompts append later user turns.
    pub fn prompt_text(&self) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prompt: u32,
    pub completion: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub backend_id: String,
    pub latency: Duration,
    pub token_counts: Option<TokenCounts>,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    /// Implementations may assume the request has been validated.
    fn complete_raw(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

pub type BackendHandle = Arc<dyn Backend>;

/// Validate and run one completion.
pub fn complete(request: &ChatRequest, backend: &dyn Backend) -> Result<ChatResponse, BackendError> {
    request.validate()?;
    let response = backend.complete_raw(request)?;
    if response.text.trim().is_empty() {
        return Err(BackendError::MalformedPayload("empty completion text".into()));
    }
    Ok(response)
}

/// Outcome of a parsed completion, with the raw text kept for logging.
#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub value: T,
    pub raw: String,
    pub attempts: u32,
}

/// Complete and parse, reprompting up to `reprompts` times on parse failure.
///
/// Empty completions count as parse failures so they are reprompted too.
pub fn ask<T>(
    backend: &dyn Backend,
    request: &ChatRequest,
    reprompts: u32,
    parse: impl Fn(&str) -> Result<T, ParseError>,
) -> Result<Parsed<T>> {
    request.validate()?;
    let mut req = request.clone();
    let mut last_err = None;
    for attempt in 0..=reprompts {
        let response = backend.complete_raw(&req)?;
        match parse(&response.text) {
            Ok(value) => {
                return Ok(Parsed {
                    value,
                    raw: response.text,
                    attempts: attempt + 1,
                })
            }
            Err(e) => {
                req.messages.push(Message::assistant(response.text));
                req.messages.push(Message::user(format!(
                    "Your reply could not be parsed ({e}). Answer again using exactly the requested format."
                )));
                last_err = Some(e);
            }
        }
    }
    Err(Error::Parse(last_err.expect("loop runs at least once")))
}

/// Wraps a backend and records the schema hint and task tag of every call.
pub struct Recorder {
    inner: BackendHandle,
    calls: Mutex<Vec<String>>,
}

impl Recorder {
    pub fn new(inner: BackendHandle) -> Self {
        Self {
            inner,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().expect("recorder poisoned").clone()
    }
}

impl Backend for Recorder {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete_raw(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let hint = request.hint.map(SchemaHint::as_str).unwrap_or("none");
        let task = crate::prompts::task_of(request.prompt_text()).unwrap_or(hint);
        self.calls.lock().expect("recorder poisoned").push(task.to_string());
        self.inner.complete_raw(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_messages_rejected() {
        let mock = MockBackend::new(0);
        let req = ChatRequest::new(vec![], Some(SchemaHint::Decision));
        assert_eq!(complete(&req, &mock).unwrap_err(), BackendError::EmptyMessages);
        assert_eq!(BackendError::EmptyMessages.to_string(), "empty messages");
    }

    #[test]
    fn temperature_defaults_to_zero_and_is_bounded() {
        let mut req = ChatRequest::new(vec![Message::user("hi")], None);
        assert_eq!(req.temperature, 0.0);
        req.temperature = 2.5;
        assert!(matches!(req.validate(), Err(BackendError::InvalidRequest(_))));
    }

    #[test]
    fn ask_reprompts_then_fails() {
        let backend = ScriptedBackend::new(["nothing useful", "still nothing", "Label: Incomplete"]);
        let req = ChatRequest::new(vec![Message::user("diagnose")], Some(SchemaHint::Diagnosis));
        let got = ask(&backend, &req, 2, parse::parse_label).unwrap();
        assert_eq!(got.attempts, 3);
        assert_eq!(got.value, crate::defects::DefectLabel::Incomplete);

        let backend = ScriptedBackend::new(["x", "y"]);
        let err = ask(&backend, &req, 1, parse::parse_label).unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
    }
}
