//! Test backends: canned replies and closures.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use super::{Backend, ChatRequest, ChatResponse};
use crate::error::BackendError;

/// Replies with a fixed list of texts in order, then fails.
pub struct ScriptedBackend {
    replies: Mutex<VecDeque<String>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().expect("script poisoned").len()
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn complete_raw(&self, _request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let text = self
            .replies
            .lock()
            .expect("script poisoned")
            .pop_front()
            .ok_or(BackendError::ScriptExhausted)?;
        Ok(ChatResponse {
            text,
            backend_id: "scripted".into(),
            latency: Duration::ZERO,
            token_counts: None,
        })
    }
}

type Handler = dyn Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync;

/// Answers with a closure over the request.
pub struct FnBackend {
    id: String,
    f: Box<Handler>,
}

impl FnBackend {
    pub fn new(
        id: impl Into<String>,
        f: impl Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            id: id.into(),
            f: Box::new(f),
        }
    }
}

impl Backend for FnBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete_raw(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        Ok(ChatResponse {
            text: (self.f)(request)?,
            backend_id: self.id.clone(),
            latency: Duration::ZERO,
            token_counts: None,
        })
    }
}
