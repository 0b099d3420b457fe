//! Model endpoints: the wire client and three offline stand-ins.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::qagen::VqaItem;
use crate::seed;

use super::protocol::{format_reply, ModelRequest, RequestMode};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClientError {
    #[error("client unavailable: {0}")]
    Unavailable(String),
    #[error("endpoint protocol error: {0}")]
    Protocol(String),
    #[error("fixture: {0}")]
    Fixture(String),
}

/// Anything that turns a request into reply text. Implementations must
/// tolerate concurrent calls from independent sessions.
pub trait ModelClient: Send + Sync {
    fn complete(&self, req: &ModelRequest) -> Result<String, ClientError>;
}

fn letter(i: usize) -> String {
    ((b'A' + i as u8) as char).to_string()
}

fn route_only(need_visual: bool) -> String {
    format!("```\nneed_visual={need_visual}\ntool=none\n```\n")
}

/// Replays scripted replies. The reply for a call is chosen by the
/// session's call counter; past the end of a script the last reply repeats.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CannedClient {
    #[serde(default)]
    pub default: Vec<String>,
    #[serde(default)]
    pub items: BTreeMap<String, Vec<String>>,
}

impl CannedClient {
    pub fn script(replies: Vec<String>) -> Self {
        CannedClient {
            default: replies,
            items: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path).map_err(|e| ClientError::Fixture(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ClientError::Fixture(format!("{}: {e}", path.display())))
    }
}

impl ModelClient for CannedClient {
    fn complete(&self, req: &ModelRequest) -> Result<String, ClientError> {
        let script = self.items.get(&req.item_key).unwrap_or(&self.default);
        script
            .get(req.call.min(script.len().saturating_sub(1)))
            .cloned()
            .ok_or_else(|| ClientError::Fixture(format!("no scripted reply for {}", req.item_key)))
    }
}

/// Answers every item with its ground truth and never asks for visuals.
#[derive(Debug, Clone, Default)]
pub struct OracleClient {
    truth: HashMap<String, usize>,
}

impl OracleClient {
    pub fn from_items(items: &[VqaItem]) -> Self {
        OracleClient {
            truth: items.iter().map(|it| (it.key(), it.answer_index)).collect(),
        }
    }
}

impl ModelClient for OracleClient {
    fn complete(&self, req: &ModelRequest) -> Result<String, ClientError> {
        if req.mode == RequestMode::Route {
            return Ok(route_only(false));
        }
        let &i = self
            .truth
            .get(&req.item_key)
            .ok_or_else(|| ClientError::Fixture(format!("no ground truth for {}", req.item_key)))?;
        let evidence: Vec<usize> = (0..req.memory_len.min(1)).collect();
        Ok(format_reply("Ground truth lookup.", &letter(i), &evidence, &[], None))
    }
}

/// Picks an option uniformly at random, seeded by item, call and trial.
#[derive(Debug, Clone, Copy)]
pub struct RandomClient {
    pub seed: u64,
    pub trial: u64,
}

impl RandomClient {
    pub fn new(seed: u64) -> Self {
        RandomClient { seed, trial: 0 }
    }

    pub fn with_trial(self, trial: u64) -> Self {
        RandomClient { trial, ..self }
    }
}

impl ModelClient for RandomClient {
    fn complete(&self, req: &ModelRequest) -> Result<String, ClientError> {
        if req.mode == RequestMode::Route {
            return Ok(route_only(false));
        }
        if req.options.is_empty() {
            return Err(ClientError::Protocol("request has no options".into()));
        }
        let key = format!("{}/{}/{}", self.trial, req.item_key, req.call);
        let i = seed::rng(self.seed, seed::STREAM_RANDOM_CLIENT, &key).gen_range(0..req.options.len());
        Ok(format_reply("Uniform guess.", &letter(i), &[], &[], None))
    }
}

#[cfg(feature = "http")]
pub use http::HttpClient;

#[cfg(feature = "http")]
mod http {
    use std::time::Duration;

    use base64::Engine as _;
    use serde_json::{json, Value};

    use super::{ClientError, ModelClient, ModelRequest};

    /// Chat-completions style endpoint with bearer auth. Retries 429 and 5xx
    /// with exponential backoff.
    #[derive(Debug)]
    pub struct HttpClient {
        endpoint: String,
        model: String,
        token: Option<String>,
        max_retries: u32,
        backoff: Duration,
        http: reqwest::blocking::Client,
    }

    impl HttpClient {
        /// Reads the bearer token from `token_env` when that variable is set.
        pub fn new(endpoint: &str, model: &str, token_env: &str, timeout: Duration) -> Result<Self, ClientError> {
            let http = reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .map_err(|e| ClientError::Unavailable(e.to_string()))?;
            Ok(HttpClient {
                endpoint: endpoint.to_string(),
                model: model.to_string(),
                token: std::env::var(token_env).ok().filter(|t| !t.is_empty()),
                max_retries: 3,
                backoff: Duration::from_millis(500),
                http,
            })
        }

        pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
            self.max_retries = max_retries;
            self.backoff = backoff;
            self
        }

        pub fn body(&self, req: &ModelRequest) -> Value {
            let mut content = vec![json!({"type": "text", "text": req.user_text()})];
            if let Some(img) = &req.image {
                let b64 = base64::engine::general_purpose::STANDARD.encode(&img.png);
                content.push(json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:image/png;base64,{b64}")}
                }));
            }
            json!({
                "model": self.model,
                "messages": [
                    {"role": "system", "content": req.system},
                    {"role": "user", "content": content}
                ]
            })
        }
    }

    impl ModelClient for HttpClient {
        fn complete(&self, req: &ModelRequest) -> Result<String, ClientError> {
            let body = self.body(req);
            let mut attempt = 0;
            loop {
                let mut rb = self.http.post(&self.endpoint).json(&body);
                if let Some(t) = &self.token {
                    rb = rb.bearer_auth(t);
                }
                let resp = rb.send().map_err(|e| ClientError::Unavailable(e.to_string()))?;
                let status = resp.status();
                if status.is_success() {
                    let v: Value = resp.json().map_err(|e| ClientError::Protocol(e.to_string()))?;
                    return v["choices"][0]["message"]["content"]
                        .as_str()
                        .map(String::from)
                        .ok_or_else(|| ClientError::Protocol("no choices[0].message.content".into()));
                }
                let retryable = status.as_u16() == 429 || status.is_server_error();
                if !retryable {
                    return Err(ClientError::Protocol(format!("status {status}")));
                }
                if attempt >= self.max_retries {
                    return Err(ClientError::Unavailable(format!("status {status} after {attempt} retries")));
                }
                std::thread::sleep(self.backoff * 2u32.pow(attempt));
                attempt += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::protocol::{parse_reply, SYSTEM_PROMPT};

    fn req(call: usize) -> ModelRequest {
        ModelRequest {
            system: SYSTEM_PROMPT.into(),
            memory: String::new(),
            memory_len: 0,
            question: "q".into(),
            options: vec!["a".into(), "b".into(), "c".into()],
            item_key: "c1/lesion-counting".into(),
            turn: call + 1,
            call,
            mode: RequestMode::Combined,
            image: None,
            reminder: None,
        }
    }

    #[test]
    fn canned_repeats_last() {
        let c = CannedClient::script(vec!["one".into(), "two".into()]);
        assert_eq!(c.complete(&req(0)).unwrap(), "one");
        assert_eq!(c.complete(&req(5)).unwrap(), "two");
        assert!(CannedClient::default().complete(&req(0)).is_err());
    }

    #[test]
    fn random_is_seeded() {
        let c = RandomClient::new(7);
        let a = c.complete(&req(0)).unwrap();
        assert_eq!(a, c.complete(&req(0)).unwrap());
        assert!(parse_reply(&a, &req(0).options).is_ok());
    }

    #[cfg(feature = "http")]
    #[test]
    fn unreachable_endpoint() {
        let c = HttpClient::new("http://127.0.0.1:9/v1", "m", "SLICEWISE_TEST_NO_TOKEN", std::time::Duration::from_millis(300)).unwrap();
        let body = c.body(&req(0));
        assert_eq!(body["messages"][0]["role"], "system");
        assert!(matches!(c.complete(&req(0)), Err(ClientError::Unavailable(_))));
    }
}
