//! Chat-completion backends used by the agents.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::http::{HttpClient, HttpError, RetryPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
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

#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Agent name, used for logging and mock routing.
    pub tag: String,
}

impl LlmRequest {
    pub fn new(tag: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            temperature: 0.0,
            max_tokens: 1024,
            tag: tag.into(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(LlmError::InvalidRequest("no user message".into()));
        }
        if self
            .messages
            .iter()
            .any(|m| m.role != Role::Assistant && m.content.trim().is_empty())
        {
            return Err(LlmError::InvalidRequest("empty system or user message".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("mock transcript exhausted: no entry left for `{tag}`")]
    TranscriptExhausted { tag: String },
    #[error("mock transcript out of order: expected `{expected}`, got request for `{actual}`")]
    TagMismatch { expected: String, actual: String },
    #[error("chat request failed{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transport { status: Option<u16>, message: String },
    #[error("malformed chat response: {0}")]
    BadResponse(String),
    #[error("no JSON object or array found in model output")]
    NoJson,
}

impl From<HttpError> for LlmError {
    fn from(e: HttpError) -> Self {
        LlmError::Transport {
            status: e.status(),
            message: e.to_string(),
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &LlmRequest) -> Result<String, LlmError>;

    /// Sequential backends must not be driven from more than one worker.
    fn is_sequential(&self) -> bool {
        false
    }

    /// Name recorded in run reports.
    fn model_name(&self) -> String;
}

/// Validates `req` and sends it to `backend`.
pub fn complete(req: &LlmRequest, backend: &dyn ChatBackend) -> Result<String, LlmError> {
    req.validate()?;
    log::debug!("llm request [{}]: {} messages", req.tag, req.messages.len());
    backend.complete(req)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub tag: String,
    pub response: String,
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("reading transcript: {0}")]
    Io(#[from] std::io::Error),
    #[error("transcript line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Scripted replies consumed strictly in order.
#[derive(Debug, Default)]
pub struct MockBackend {
    entries: Mutex<VecDeque<TranscriptEntry>>,
}

impl MockBackend {
    pub fn new(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        Self {
            entries: Mutex::new(entries.into_iter().collect()),
        }
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self::new(pairs.into_iter().map(|(t, r)| TranscriptEntry {
            tag: t.into(),
            response: r.into(),
        }))
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, TranscriptError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: TranscriptEntry = serde_json::from_str(line).map_err(|e| TranscriptError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            entries.push(e);
        }
        Ok(Self::new(entries))
    }

    pub fn load(path: &Path) -> Result<Self, TranscriptError> {
        Self::parse_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn remaining(&self) -> usize {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).len()
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, req: &LlmRequest) -> Result<String, LlmError> {
        let mut entries = self.entries.lock().unwrap_or_else(|e| e.into_inner());
        let next = entries.front().ok_or_else(|| LlmError::TranscriptExhausted {
            tag: req.tag.clone(),
        })?;
        if next.tag != req.tag {
            return Err(LlmError::TagMismatch {
                expected: next.tag.clone(),
                actual: req.tag.clone(),
            });
        }
        Ok(entries.pop_front().expect("checked above").response)
    }

    fn is_sequential(&self) -> bool {
        true
    }

    fn model_name(&self) -> String {
        "mock".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteChatConfig {
    pub base_url: String,
    pub model: String,
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for RemoteChatConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            model: "llama-3-70b-instruct".into(),
            max_attempts: 3,
            initial_backoff_ms: 500,
            max_in_flight: 4,
            timeout_secs: 300,
        }
    }
}

/// Client for an OpenAI-style `/chat/completions` endpoint.
pub struct RemoteChat {
    client: HttpClient,
    model: String,
}

impl RemoteChat {
    pub fn new(cfg: &RemoteChatConfig, api_key: Option<String>) -> Self {
        let retry = RetryPolicy {
            max_attempts: cfg.max_attempts.max(1),
            initial_backoff: Duration::from_millis(cfg.initial_backoff_ms),
            ..RetryPolicy::default()
        };
        Self {
            client: HttpClient::new(
                &cfg.base_url,
                api_key,
                retry,
                cfg.max_in_flight,
                Duration::from_secs(cfg.timeout_secs),
            ),
            model: cfg.model.clone(),
        }
    }

    /// Retries performed so far.
    pub fn retries(&self) -> usize {
        self.client.retries()
    }

    pub fn request_body(&self, req: &LlmRequest) -> Value {
        json!({
            "model": self.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        })
    }
}

impl ChatBackend for RemoteChat {
    fn complete(&self, req: &LlmRequest) -> Result<String, LlmError> {
        let reply = self.client.post_json("chat/completions", &self.request_body(req))?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| LlmError::BadResponse("missing choices[0].message.content".into()))
    }

    fn model_name(&self) -> String {
        self.model.clone()
    }
}

/// End offset (exclusive) of the balanced bracket group opening at `start`,
/// skipping over JSON string literals.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut stack = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => stack.push(b'}'),
            b'[' => stack.push(b']'),
            b'}' | b']' => {
                if stack.pop() != Some(b) {
                    return None;
                }
                if stack.is_empty() {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parses the first balanced JSON object or array embedded in `text`.
///
/// Code fences and surrounding prose are ignored. Candidates are tried left
/// to right; the first that parses wins.
pub fn extract_json_block(text: &str) -> Result<Value, LlmError> {
    let bytes = text.as_bytes();
    for (start, &b) in bytes.iter().enumerate() {
        if b != b'{' && b != b'[' {
            continue;
        }
        if let Some(end) = balanced_end(bytes, start) {
            if let Ok(v) = serde_json::from_str(&text[start..end]) {
                return Ok(v);
            }
        }
    }
    Err(LlmError::NoJson)
}
