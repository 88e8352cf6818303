//! Generation backends: an OpenAI-compatible HTTP client and a scripted mock.
//!
//! Backends only return text. Tag parsing happens in the caller.

use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine as _;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub media_refs: Vec<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    /// e.g. `init:i=3`, `agg:t=2,i=5`, `final`.
    pub request_tag: String,
    /// 0 for the first try, incremented per retry.
    pub attempt: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("transport error (status {status:?}): {detail}")]
    Transport { status: Option<u16>, detail: String },
    #[error("request timed out")]
    Timeout,
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("media reference `{0}` could not be encoded: {1}")]
    Media(String, String),
}

impl BackendError {
    pub fn transport(detail: impl Into<String>) -> Self {
        BackendError::Transport {
            status: None,
            detail: detail.into(),
        }
    }
}

/// Sampling primitive. Implementations must tolerate concurrent calls.
#[async_trait]
pub trait Backend: Send + Sync {
    async fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpBackendConfig {
    /// Base URL up to and including the version segment, e.g. `http://host:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout: Duration,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout: Duration::from_secs(120),
        }
    }
}

/// Chat-completions client: one user message with text and image parts.
pub struct HttpBackend {
    client: reqwest::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::transport(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            model: config.model,
            api_key: std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty()),
        })
    }

    pub fn request_body(&self, request: &GenerationRequest) -> Result<Value, BackendError> {
        let mut content = Vec::with_capacity(request.media_refs.len() + 1);
        for media in &request.media_refs {
            content.push(json!({"type": "image_url", "image_url": {"url": media_url(media)?}}));
        }
        content.push(json!({"type": "text", "text": request.prompt}));
        Ok(json!({
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        }))
    }
}

/// URLs pass through; local files are inlined as base64 data URLs.
pub fn media_url(media: &str) -> Result<String, BackendError> {
    if ["http://", "https://", "data:"].iter().any(|p| media.starts_with(p)) {
        return Ok(media.to_string());
    }
    let bytes = std::fs::read(media).map_err(|e| BackendError::Media(media.into(), e.to_string()))?;
    let mime = match Path::new(media)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "image/jpeg",
    };
    Ok(format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

fn completion_text(body: &Value) -> Option<String> {
    let content = body.pointer("/choices/0/message/content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

#[async_trait]
impl Backend for HttpBackend {
    async fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let body = self.request_body(request)?;
        let mut call = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let response = call.send().await.map_err(map_reqwest)?;
        let status = response.status();
        if !status.is_success() {
            let detail = response.text().await.unwrap_or_default();
            return Err(BackendError::Transport {
                status: Some(status.as_u16()),
                detail,
            });
        }
        let value: Value = response.json().await.map_err(map_reqwest)?;
        match completion_text(&value) {
            Some(text) if !text.trim().is_empty() => Ok(text),
            Some(_) => Err(BackendError::EmptyCompletion),
            None => Err(BackendError::transport("response has no choices[0].message.content")),
        }
    }
}

fn map_reqwest(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::Transport {
            status: e.status().map(|s| s.as_u16()),
            detail: e.to_string(),
        }
    }
}

/// One scripted fixture line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Regex matched against the whole request tag.
    pub request_tag_pattern: String,
    #[serde(default)]
    pub response: String,
    /// Serve this entry forever instead of once.
    #[serde(default)]
    pub repeat: bool,
    /// Fail instead of responding: `timeout`, `empty` or any transport detail.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ScriptEntry {
    pub fn once(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            request_tag_pattern: pattern.into(),
            response: response.into(),
            repeat: false,
            error: None,
        }
    }

    pub fn always(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            repeat: true,
            ..Self::once(pattern, response)
        }
    }
}

struct Slot {
    pattern: Regex,
    entry: ScriptEntry,
    used: bool,
}

/// Replays scripted responses. Each request takes the first unused entry
/// whose pattern matches its tag.
pub struct ScriptedBackend {
    queue: Mutex<Vec<Slot>>,
    log: Mutex<Vec<GenerationRequest>>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {detail}")]
    Line { line: usize, detail: String },
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, regex::Error> {
        let queue = entries
            .into_iter()
            .map(|entry| {
                Ok(Slot {
                    pattern: Regex::new(&format!("^(?:{})$", entry.request_tag_pattern))?,
                    entry,
                    used: false,
                })
            })
            .collect::<Result<_, regex::Error>>()?;
        Ok(Self {
            queue: Mutex::new(queue),
            log: Mutex::new(Vec::new()),
        })
    }

    /// Every request seen so far.
    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(line).map_err(|e| ScriptError::Line {
                line: i + 1,
                detail: e.to_string(),
            })?;
            entries.push(entry);
        }
        Self::new(entries).map_err(|e| ScriptError::Line {
            line: 0,
            detail: e.to_string(),
        })
    }
}

#[async_trait]
impl Backend for ScriptedBackend {
    async fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        self.log.lock().expect("log lock").push(request.clone());
        let mut queue = self.queue.lock().expect("queue lock");
        let slot = queue
            .iter_mut()
            .find(|s| !s.used && s.pattern.is_match(&request.request_tag))
            .ok_or_else(|| BackendError::transport(format!("no scripted response for `{}`", request.request_tag)))?;
        if !slot.entry.repeat {
            slot.used = true;
        }
        match slot.entry.error.as_deref() {
            None => Ok(slot.entry.response.clone()),
            Some("timeout") => Err(BackendError::Timeout),
            Some("empty") => Err(BackendError::EmptyCompletion),
            Some(detail) => Err(BackendError::transport(detail)),
        }
    }
}
