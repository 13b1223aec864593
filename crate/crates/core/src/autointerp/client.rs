// SPDX-License-Identifier: MIT OR Apache-2.0

//! Chat-completion endpoint clients: HTTP, scripted mock, and record/replay.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::bundle::sha256_hex;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    /// Retry attempt counter; part of the replay key so retries can be recorded distinctly.
    #[serde(default)]
    pub attempt: u32,
}

impl ChatRequest {
    /// Stable key used by the record/replay store.
    pub fn key(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("request serializes").as_bytes())
    }
}

pub trait ChatClient: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    /// Environment variable holding the bearer token; unset means no auth header.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

impl EndpointConfig {
    pub fn request(&self, system: &str, user: &str) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            system: system.to_string(),
            user: user.to_string(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            attempt: 0,
        }
    }
}

/// OpenAI-style `/chat/completions` client.
pub struct HttpClient {
    url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(cfg: &EndpointConfig) -> Result<Self> {
        let token = match &cfg.auth_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        Ok(Self {
            url: cfg.url.clone(),
            token,
            agent,
        })
    }
}

impl ChatClient for HttpClient {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let mut body = serde_json::json!({
            "model": req.model,
            "temperature": req.temperature,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
        });
        if let Some(m) = req.max_tokens {
            body["max_tokens"] = m.into();
        }
        let mut call = self.agent.post(&self.url);
        if let Some(t) = &self.token {
            call = call.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = call
            .send_json(&body)
            .map_err(|e| Error::Transport(e.to_string()))?;
        let value: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Transport("response has no choices[0].message.content".into()))
    }
}

/// Client answering from a closure; used in tests and dry runs.
pub struct MockClient<F> {
    f: F,
}

impl<F> MockClient<F>
where
    F: Fn(&ChatRequest) -> Result<String> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F> ChatClient for MockClient<F>
where
    F: Fn(&ChatRequest) -> Result<String> + Send + Sync,
{
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        (self.f)(req)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Recorded {
    key: String,
    response: String,
}

/// Forwards to an inner client and appends each response to a JSON-lines file.
pub struct RecordingClient<C> {
    inner: C,
    path: PathBuf,
    lock: Mutex<()>,
}

impl<C: ChatClient> RecordingClient<C> {
    pub fn new(inner: C, path: &Path) -> Self {
        Self {
            inner,
            path: path.to_path_buf(),
            lock: Mutex::new(()),
        }
    }
}

impl<C: ChatClient> ChatClient for RecordingClient<C> {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let response = self.inner.complete(req)?;
        let line = serde_json::to_string(&Recorded {
            key: req.key(),
            response: response.clone(),
        })?;
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))?;
        Ok(response)
    }
}

/// Answers only from a recorded JSON-lines file.
pub struct ReplayClient {
    responses: HashMap<String, String>,
}

impl ReplayClient {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut responses = HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: Recorded = serde_json::from_str(line)?;
            responses.insert(r.key, r.response);
        }
        Ok(Self { responses })
    }
}

impl ChatClient for ReplayClient {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let key = req.key();
        self.responses.get(&key).cloned().ok_or(Error::ReplayMiss(key))
    }
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        (**self).complete(req)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        (**self).complete(req)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 2,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(retries: u32) -> Self {
        Self {
            retries,
            base_delay_ms: 0,
        }
    }
}

/// Sends `req` and parses the reply, retrying transport and parse failures
/// with exponential backoff. The last error is returned once retries run out.
pub fn complete_with_retries<T>(
    client: &dyn ChatClient,
    req: &ChatRequest,
    policy: RetryPolicy,
    parse: impl Fn(&str) -> Result<T>,
) -> Result<(T, String)> {
    let mut attempt = 0;
    loop {
        let mut r = req.clone();
        r.attempt = attempt;
        let result = client.complete(&r).and_then(|raw| parse(&raw).map(|v| (v, raw)));
        match result {
            Ok(v) => return Ok(v),
            Err(Error::Transport(_) | Error::Parse(_)) if attempt < policy.retries => {
                let delay = policy.base_delay_ms.saturating_mul(1 << attempt);
                if delay > 0 {
                    std::thread::sleep(Duration::from_millis(delay));
                }
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}
