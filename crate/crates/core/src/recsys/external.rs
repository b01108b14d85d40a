//! Recommenders living in another process.
//!
//! Both transports carry one JSON object per request,
//! `{"user": .., "history": [..], "candidates": [..]}`, answered by
//! `{"scores": [..]}` with one score per candidate.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::Recommender;
use crate::catalog::ItemId;
use crate::error::{BackendError, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScoreRequest<'a> {
    pub user: &'a str,
    pub history: &'a [ItemId],
    pub candidates: &'a [ItemId],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub scores: Vec<f64>,
}

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

enum Transport {
    Process(Mutex<Pipe>),
    Http {
        url: String,
        client: reqwest::blocking::Client,
    },
}

pub struct ExternalRecommender {
    id: String,
    transport: Transport,
}

fn remote_err(detail: impl ToString) -> Error {
    Error::Backend(BackendError::Transport {
        attempts: 1,
        detail: detail.to_string(),
    })
}

impl ExternalRecommender {
    /// Spawns `program args..` and talks to it over stdin/stdout, one line each way.
    pub fn spawn(id: impl Into<String>, program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::io(program, e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            id: id.into(),
            transport: Transport::Process(Mutex::new(Pipe { child, stdin, stdout })),
        })
    }

    /// POSTs each request to `url`.
    pub fn http(id: impl Into<String>, url: impl Into<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(remote_err)?;
        Ok(Self {
            id: id.into(),
            transport: Transport::Http { url: url.into(), client },
        })
    }

    fn exchange(&self, req: &ScoreRequest<'_>) -> Result<ScoreResponse> {
        let raw = match &self.transport {
            Transport::Process(pipe) => {
                let mut pipe = pipe.lock().expect("pipe poisoned");
                let mut line = serde_json::to_string(req)?;
                line.push('\n');
                pipe.stdin.write_all(line.as_bytes()).map_err(remote_err)?;
                pipe.stdin.flush().map_err(remote_err)?;
                let mut reply = String::new();
                if pipe.stdout.read_line(&mut reply).map_err(remote_err)? == 0 {
                    return Err(remote_err(format!("{} closed its output", self.id)));
                }
                reply
            }
            Transport::Http { url, client } => {
                let resp = client.post(url).json(req).send().map_err(remote_err)?;
                let status = resp.status();
                let body = resp.text().map_err(remote_err)?;
                if !status.is_success() {
                    return Err(Error::Backend(BackendError::Status {
                        status: status.as_u16(),
                        body,
                    }));
                }
                body
            }
        };
        serde_json::from_str(raw.trim())
            .map_err(|e| Error::Backend(BackendError::MalformedPayload(e.to_string())))
    }
}

impl Drop for ExternalRecommender {
    fn drop(&mut self) {
        if let Transport::Process(pipe) = &self.transport {
            if let Ok(mut p) = pipe.lock() {
                let _ = p.child.kill();
                let _ = p.child.wait();
            }
        }
    }
}

impl Recommender for ExternalRecommender {
    fn id(&self) -> &str {
        &self.id
    }

    fn score(&self, user: &str, history: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>> {
        let resp = self.exchange(&ScoreRequest { user, history, candidates })?;
        if resp.scores.len() != candidates.len() {
            return Err(Error::Invariant(format!(
                "{} returned {} scores for {} candidates",
                self.id,
                resp.scores.len(),
                candidates.len()
            )));
        }
        Ok(resp.scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;
    use std::net::TcpListener;

    #[test]
    fn process_transport() {
        // scores each candidate by its own id, via a shell one-liner
        let script = r#"while read -r line; do
  c=$(printf '%s' "$line" | sed 's/.*"candidates":\[\([^]]*\)\].*/\1/')
  printf '{"scores":[%s]}\n' "$c"
done"#;
        let rec = ExternalRecommender::spawn("sh", "sh", &["-c".into(), script.into()]).unwrap();
        assert_eq!(rec.score("u", &[1, 2], &[5, 3, 9]).unwrap(), [5.0, 3.0, 9.0]);
        assert_eq!(rec.score("u", &[], &[7]).unwrap(), [7.0]);
    }

    #[test]
    fn process_that_exits_is_an_error() {
        let rec = ExternalRecommender::spawn("true", "true", &[]).unwrap();
        assert!(rec.score("u", &[], &[1]).is_err());
    }

    #[test]
    fn http_transport() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/score", listener.local_addr().unwrap());
        let server = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut buf = [0u8; 4096];
            let mut got = Vec::new();
            // read until the JSON body has arrived
            while !String::from_utf8_lossy(&got).contains("]}") {
                let n = s.read(&mut buf).unwrap();
                got.extend_from_slice(&buf[..n]);
            }
            let body = r#"{"scores":[0.5,-1.0]}"#;
            write!(s, "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
            String::from_utf8(got).unwrap()
        });
        let rec = ExternalRecommender::http("h", url, Duration::from_secs(5)).unwrap();
        assert_eq!(rec.score("u7", &[3], &[1, 2]).unwrap(), [0.5, -1.0]);
        let req = server.join().unwrap();
        assert!(req.contains(r#"{"user":"u7","history":[3],"candidates":[1,2]}"#));
    }

    #[test]
    fn wrong_score_count() {
        let rec = ExternalRecommender::spawn(
            "sh",
            "sh",
            &["-c".into(), r#"while read -r l; do echo '{"scores":[1]}'; done"#.into()],
        )
        .unwrap();
        assert!(matches!(rec.score("u", &[], &[1, 2]), Err(Error::Invariant(_))));
    }
}
