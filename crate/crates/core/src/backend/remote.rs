//! OpenAI-compatible chat-completions client.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::limit::{Semaphore, TokenBucket};
use super::{Backend, ChatRequest, ChatResponse, TokenCounts};
use crate::error::BackendError;

pub const DEFAULT_KEY_ENV: &str = "DGDPO_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    /// Base URL without the `/v1/chat/completions` suffix.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token. Never read from config files.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub requests_per_second: f64,
    pub max_concurrency: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            model: "default".into(),
            api_key_env: DEFAULT_KEY_ENV.into(),
            timeout_secs: 60,
            max_attempts: 3,
            backoff_ms: 500,
            requests_per_second: 5.0,
            max_concurrency: 4,
        }
    }
}

pub struct RemoteBackend {
    id: String,
    config: RemoteConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    bucket: TokenBucket,
    slots: Semaphore,
}

enum Failure {
    Retry(BackendError),
    Fatal(BackendError),
}

impl RemoteBackend {
    /// Reads the credential from the configured environment variable.
    pub fn from_env(config: RemoteConfig) -> Result<Self, BackendError> {
        let key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Self::new(config, key)
    }

    pub fn new(config: RemoteConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        if config.base_url.is_empty() {
            return Err(BackendError::NotConfigured("base_url is empty".into()));
        }
        if config.max_attempts == 0 {
            return Err(BackendError::NotConfigured("max_attempts must be at least 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| BackendError::NotConfigured(e.to_string()))?;
        Ok(Self {
            id: format!("remote:{}", config.model),
            bucket: TokenBucket::new(config.requests_per_second, 1.0),
            slots: Semaphore::new(config.max_concurrency),
            config,
            api_key,
            client,
        })
    }

    fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<(String, Option<TokenCounts>), Failure> {
        let mut req = self.client.post(self.url()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| Failure::Retry(BackendError::Transport { attempts: 1, detail: e.to_string() }))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| Failure::Retry(BackendError::Transport { attempts: 1, detail: e.to_string() }))?;
        if !status.is_success() {
            let err = BackendError::Status { status: status.as_u16(), body: truncate(&text, 512) };
            return Err(if status.as_u16() == 429 || status.is_server_error() {
                Failure::Retry(err)
            } else {
                Failure::Fatal(err)
            });
        }
        parse_completion(&text).map_err(Failure::Fatal)
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u32,
    completion_tokens: u32,
}

pub fn request_body(model: &str, request: &ChatRequest) -> serde_json::Value {
    json!({
        "model": model,
        "messages": request.messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    })
}

pub fn parse_completion(body: &str) -> Result<(String, Option<TokenCounts>), BackendError> {
    let wire: WireResponse =
        serde_json::from_str(body).map_err(|e| BackendError::MalformedPayload(e.to_string()))?;
    let content = wire
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| BackendError::MalformedPayload("no choices[0].message.content".into()))?;
    let counts = wire.usage.map(|u| TokenCounts {
        prompt: u.prompt_tokens,
        completion: u.completion_tokens,
    });
    Ok((content, counts))
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete_raw(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let body = request_body(&self.config.model, request);
        let _permit = self.slots.acquire();
        let start = Instant::now();
        let mut last = None;
        for attempt in 1..=self.config.max_attempts {
            if attempt > 1 {
                let backoff = self.config.backoff_ms.saturating_mul(1 << (attempt - 2).min(16));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            self.bucket.acquire();
            match self.attempt(&body) {
                Ok((text, token_counts)) => {
                    return Ok(ChatResponse {
                        text,
                        backend_id: self.id.clone(),
                        latency: start.elapsed(),
                        token_counts,
                    })
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(e)) => {
                    log::warn!("{} attempt {attempt} failed: {e}", self.id);
                    last = Some(e);
                }
            }
        }
        Err(match last.expect("at least one attempt") {
            BackendError::Transport { detail, .. } => BackendError::Transport {
                attempts: self.config.max_attempts,
                detail,
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{complete, Message};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Serves canned (status, body) replies in order and records request bodies.
    type Seen = Arc<Mutex<Vec<(String, String)>>>;

    fn serve(replies: Vec<(u16, String)>) -> (String, Seen) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut len = 0;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    let lower = l.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = l["authorization:".len()..].trim().to_string();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push((auth, String::from_utf8(buf).unwrap()));
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (addr, seen)
    }

    fn ok_body(text: &str) -> String {
        json!({
            "choices": [{"message": {"role": "assistant", "content": text}}],
            "usage": {"prompt_tokens": 7, "completion_tokens": 3}
        })
        .to_string()
    }

    fn config(base_url: String) -> RemoteConfig {
        RemoteConfig {
            base_url,
            model: "m1".into(),
            backoff_ms: 1,
            requests_per_second: 0.0,
            ..RemoteConfig::default()
        }
    }

    fn req() -> ChatRequest {
        ChatRequest::new(vec![Message::system("s"), Message::user("hello")], None)
    }

    #[test]
    fn wire_round_trip() {
        let (url, seen) = serve(vec![(200, ok_body("Decision: yes"))]);
        let b = RemoteBackend::new(config(url), Some("k123".into())).unwrap();
        let r = complete(&req(), &b).unwrap();
        assert_eq!(r.text, "Decision: yes");
        assert_eq!(r.token_counts, Some(TokenCounts { prompt: 7, completion: 3 }));
        let seen = seen.lock().unwrap();
        assert_eq!(seen[0].0, "Bearer k123");
        let body: serde_json::Value = serde_json::from_str(&seen[0].1).unwrap();
        assert_eq!(body["model"], "m1");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["messages"][1]["role"], "user");
        assert_eq!(body["messages"][1]["content"], "hello");
    }

    #[test]
    fn retries_429_and_5xx() {
        let (url, seen) = serve(vec![
            (429, "{}".into()),
            (503, "{}".into()),
            (200, ok_body("fine")),
        ]);
        let b = RemoteBackend::new(config(url), None).unwrap();
        assert_eq!(complete(&req(), &b).unwrap().text, "fine");
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn gives_up_after_max_attempts() {
        let (url, _) = serve(vec![(500, "a".into()), (500, "b".into()), (500, "c".into())]);
        let b = RemoteBackend::new(config(url), None).unwrap();
        assert_eq!(
            complete(&req(), &b).unwrap_err(),
            BackendError::Status { status: 500, body: "c".into() }
        );
    }

    #[test]
    fn client_error_not_retried() {
        let (url, seen) = serve(vec![(400, "bad".into()), (200, ok_body("never"))]);
        let b = RemoteBackend::new(config(url), None).unwrap();
        assert!(matches!(complete(&req(), &b), Err(BackendError::Status { status: 400, .. })));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn transport_failure_reports_attempts() {
        // bind then drop to get a port nobody listens on
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let b = RemoteBackend::new(config(format!("http://127.0.0.1:{port}")), None).unwrap();
        match complete(&req(), &b) {
            Err(BackendError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_payload() {
        assert!(matches!(parse_completion("{\"choices\":[]}"), Err(BackendError::MalformedPayload(_))));
        assert!(matches!(parse_completion("nope"), Err(BackendError::MalformedPayload(_))));
    }
}
