use std::collections::VecDeque;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use base64::Engine;
use dashmap::DashMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::prompt::{Part, PromptBundle};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("model error {status}: {body}")]
    Model { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

impl GatewayError {
    pub fn status(&self) -> Option<u16> {
        match self {
            GatewayError::Model { status, .. } => Some(*status),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
}

/// Anything that can answer a chat prompt: HTTP endpoints, scripted in-process mocks.
#[async_trait]
pub trait ChatModel: Send + Sync {
    fn model_id(&self) -> &str;
    async fn chat(&self, prompt: &PromptBundle) -> Result<ChatResponse, GatewayError>;
}

fn default_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_max_edge() -> Option<u32> {
    Some(768)
}
fn default_rate_window() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
    /// Length of the rate-cap window; 60 s unless overridden.
    #[serde(default = "default_rate_window")]
    pub rate_window_secs: f64,
    /// Re-encode frames as JPEG bounded by this edge length; `None` sends files as-is.
    #[serde(default = "default_max_edge")]
    pub max_image_edge: Option<u32>,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            retries: default_retries(),
            backoff_base_ms: default_backoff_ms(),
            requests_per_minute: None,
            rate_window_secs: default_rate_window(),
            max_image_edge: default_max_edge(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.timeout_secs > 0.0) {
            return Err(GatewayError::InvalidConfig(format!("timeout_secs must be > 0, got {}", self.timeout_secs)));
        }
        if !(self.rate_window_secs > 0.0) {
            return Err(GatewayError::InvalidConfig("rate_window_secs must be > 0".into()));
        }
        if self.requests_per_minute == Some(0) {
            return Err(GatewayError::InvalidConfig("requests_per_minute must be >= 1".into()));
        }
        if !self.base_url.starts_with("http://") && !self.base_url.starts_with("https://") {
            return Err(GatewayError::InvalidConfig(format!("base_url must be http(s): {}", self.base_url)));
        }
        Ok(())
    }

    fn api_key(&self) -> Option<String> {
        self.api_key_env.as_ref().and_then(|v| std::env::var(v).ok()).filter(|k| !k.is_empty())
    }
}

/// Sliding-window request cap shared by all callers of one client.
#[derive(Debug)]
pub struct RateLimiter {
    cap: usize,
    window: Duration,
    issued: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    pub fn new(cap: usize, window: Duration) -> Self {
        Self { cap, window, issued: Mutex::new(VecDeque::new()) }
    }

    /// Waits until a slot is free inside the window, then claims it.
    pub async fn acquire(&self) {
        loop {
            let wait = {
                let mut q = self.issued.lock().expect("limiter lock");
                let now = Instant::now();
                while q.front().is_some_and(|t| now.duration_since(*t) >= self.window) {
                    q.pop_front();
                }
                if q.len() < self.cap {
                    q.push_back(now);
                    return;
                }
                self.window - now.duration_since(*q.front().expect("full queue"))
            };
            tokio::time::sleep(wait).await;
        }
    }
}

/// Encodes image files as data URLs, caching by (path, max edge).
#[derive(Debug, Default)]
pub struct ImageEncoder {
    cache: DashMap<(PathBuf, Option<u32>), Arc<String>>,
}

impl ImageEncoder {
    pub fn data_url(&self, path: &Path, max_edge: Option<u32>) -> Result<Arc<String>, GatewayError> {
        let key = (path.to_path_buf(), max_edge);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.clone());
        }
        let err = |reason: String| GatewayError::Image { path: path.to_path_buf(), reason };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        let (mime, payload) = match max_edge {
            None => {
                let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
                    Some("png") => "image/png",
                    _ => "image/jpeg",
                };
                (mime, bytes)
            }
            Some(edge) => {
                let img = image::load_from_memory(&bytes).map_err(|e| err(e.to_string()))?;
                let img = if img.width() > edge || img.height() > edge { img.thumbnail(edge, edge) } else { img };
                let mut out = Cursor::new(Vec::new());
                img.to_rgb8().write_to(&mut out, image::ImageFormat::Jpeg).map_err(|e| err(e.to_string()))?;
                ("image/jpeg", out.into_inner())
            }
        };
        let url = Arc::new(format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(payload)));
        self.cache.insert(key, url.clone());
        Ok(url)
    }
}

/// OpenAI-compatible request body. Text parts are copied verbatim.
pub fn build_request_body(
    model: &str,
    prompt: &PromptBundle,
    image_url: &dyn Fn(&Path) -> Result<Arc<String>, GatewayError>,
) -> Result<Value, GatewayError> {
    let mut messages = Vec::with_capacity(prompt.messages.len());
    for m in &prompt.messages {
        let mut content = Vec::with_capacity(m.parts.len());
        for p in &m.parts {
            content.push(match p {
                Part::Text { text } => json!({"type": "text", "text": text}),
                Part::Image { path, .. } => json!({"type": "image_url", "image_url": {"url": image_url(path)?.as_str()}}),
            });
        }
        messages.push(json!({"role": m.role.as_str(), "content": content}));
    }
    Ok(json!({
        "model": model,
        "messages": messages,
        "max_tokens": prompt.params.max_tokens,
        "temperature": prompt.params.temperature,
    }))
}

/// Text/image view of a wire request, mirroring [`PromptBundle::text_view`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireQuery {
    pub text: String,
    pub image_count: usize,
}

impl WireQuery {
    pub fn from_prompt(prompt: &PromptBundle) -> Self {
        Self { text: prompt.text_view(), image_count: prompt.image_count() }
    }

    pub fn from_body(body: &Value) -> Self {
        let mut texts = Vec::new();
        let mut image_count = 0;
        for m in body["messages"].as_array().into_iter().flatten() {
            match &m["content"] {
                Value::String(s) => texts.push(s.clone()),
                Value::Array(items) => {
                    for item in items {
                        match item["type"].as_str() {
                            Some("text") => texts.push(item["text"].as_str().unwrap_or_default().to_string()),
                            Some("image_url") => image_count += 1,
                            _ => {}
                        }
                    }
                }
                _ => {}
            }
        }
        Self { text: texts.join("\n"), image_count }
    }
}

pub fn parse_response_body(body: &Value) -> Result<ChatResponse, GatewayError> {
    let text = body["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| GatewayError::MalformedResponse(truncate(&body.to_string(), 200)))?
        .to_string();
    let usage = Usage {
        prompt_tokens: body["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
        completion_tokens: body["usage"]["completion_tokens"].as_u64().unwrap_or(0),
    };
    Ok(ChatResponse { text, usage })
}

fn truncate(s: &str, n: usize) -> String {
    if s.len() <= n {
        return s.to_string();
    }
    let mut end = n;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}...", &s[..end])
}

/// HTTP client for one endpoint; cheap to share behind an `Arc`.
#[derive(Debug)]
pub struct HttpClient {
    cfg: EndpointConfig,
    http: reqwest::Client,
    limiter: Option<RateLimiter>,
    images: ImageEncoder,
    trace_dir: Option<PathBuf>,
    trace_lock: Mutex<()>,
}

impl HttpClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
        let limiter = cfg
            .requests_per_minute
            .map(|cap| RateLimiter::new(cap as usize, Duration::from_secs_f64(cfg.rate_window_secs)));
        Ok(Self { cfg, http, limiter, images: ImageEncoder::default(), trace_dir: None, trace_lock: Mutex::new(()) })
    }

    /// Appends request/response records (images elided, key never written) to `dir/trace.jsonl`.
    pub fn with_trace(mut self, dir: PathBuf) -> Self {
        self.trace_dir = Some(dir);
        self
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn trace(&self, body: &Value, outcome: &Result<ChatResponse, GatewayError>) {
        let Some(dir) = &self.trace_dir else { return };
        let mut redacted = body.clone();
        for m in redacted["messages"].as_array_mut().into_iter().flatten() {
            for item in m["content"].as_array_mut().into_iter().flatten() {
                if item["type"] == "image_url" {
                    item["image_url"]["url"] = json!("<image elided>");
                }
            }
        }
        let record = json!({
            "url": self.url(),
            "authorization": if self.cfg.api_key().is_some() { "Bearer ***" } else { "" },
            "request": redacted,
            "response": match outcome { Ok(r) => json!(r), Err(e) => json!({"error": e.to_string()}) },
        });
        let _guard = self.trace_lock.lock().expect("trace lock");
        let write = std::fs::create_dir_all(dir).and_then(|_| {
            use std::io::Write;
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(dir.join("trace.jsonl"))?;
            writeln!(f, "{record}")
        });
        if let Err(e) = write {
            log::warn!("trace write failed: {e}");
        }
    }

    async fn attempt(&self, body: &Value) -> Result<ChatResponse, (bool, GatewayError)> {
        if let Some(l) = &self.limiter {
            l.acquire().await;
        }
        let mut req = self.http.post(self.url()).json(body);
        if let Some(key) = self.cfg.api_key() {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| (true, GatewayError::Transport { attempts: 0, message: e.to_string() }))?;
        let status = resp.status();
        let text = resp
            .text()
            .await
            .map_err(|e| (true, GatewayError::Transport { attempts: 0, message: e.to_string() }))?;
        if !status.is_success() {
            let transient = status.as_u16() == 429 || status.is_server_error();
            return Err((transient, GatewayError::Model { status: status.as_u16(), body: truncate(&text, 500) }));
        }
        let value: Value =
            serde_json::from_str(&text).map_err(|e| (false, GatewayError::MalformedResponse(e.to_string())))?;
        parse_response_body(&value).map_err(|e| (false, e))
    }
}

#[async_trait]
impl ChatModel for HttpClient {
    fn model_id(&self) -> &str {
        &self.cfg.model
    }

    async fn chat(&self, prompt: &PromptBundle) -> Result<ChatResponse, GatewayError> {
        if prompt.is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let max_edge = self.cfg.max_image_edge;
        let body = build_request_body(&self.cfg.model, prompt, &|p| self.images.data_url(p, max_edge))?;
        let attempts = self.cfg.retries + 1;
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = self.cfg.backoff_base_ms.saturating_mul(1u64 << (attempt - 1).min(16));
                tokio::time::sleep(Duration::from_millis(backoff)).await;
            }
            match self.attempt(&body).await {
                Ok(r) => {
                    let out = Ok(r);
                    self.trace(&body, &out);
                    return out;
                }
                Err((transient, e)) => {
                    log::debug!("attempt {} of {attempts} failed: {e}", attempt + 1);
                    last = Some(e);
                    if !transient {
                        break;
                    }
                }
            }
        }
        let err = match last.expect("at least one attempt") {
            GatewayError::Transport { message, .. } => GatewayError::Transport { attempts, message },
            e => e,
        };
        let out = Err(err);
        self.trace(&body, &out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::Message;

    #[test]
    fn request_body_keeps_text_verbatim() {
        let text = "Frame0:  \u{00b0} \"quoted\"\n\ttabbed";
        let prompt = PromptBundle::new(vec![
            Message::system("sys"),
            Message::user(vec![Part::text(text), Part::Image { path: "x.jpg".into(), label: "Frame0:".into() }]),
        ]);
        let body = build_request_body("m", &prompt, &|_| Ok(Arc::new("data:image/jpeg;base64,AAAA".into()))).unwrap();
        assert_eq!(body["messages"][1]["content"][0]["text"].as_str().unwrap(), text);
        assert_eq!(WireQuery::from_body(&body), WireQuery::from_prompt(&prompt));
        assert_eq!(body["max_tokens"], 1024);
        assert_eq!(body["temperature"], 0.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = EndpointConfig::new("http://localhost:1", "m");
        assert!(cfg.validate().is_ok());
        cfg.timeout_secs = 0.0;
        assert!(cfg.validate().is_err());
        let cfg = EndpointConfig::new("localhost:1", "m");
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn image_encoding_resizes_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        image::RgbImage::from_pixel(1000, 500, image::Rgb([10, 20, 30])).save(&path).unwrap();
        let enc = ImageEncoder::default();
        let url = enc.data_url(&path, Some(100)).unwrap();
        assert!(url.starts_with("data:image/jpeg;base64,"));
        let raw = base64::engine::general_purpose::STANDARD.decode(&url["data:image/jpeg;base64,".len()..]).unwrap();
        let img = image::load_from_memory(&raw).unwrap();
        assert_eq!((img.width(), img.height()), (100, 50));
        assert!(Arc::ptr_eq(&url, &enc.data_url(&path, Some(100)).unwrap()));
        assert!(enc.data_url(&dir.path().join("missing.jpg"), None).is_err());
    }

    #[tokio::test]
    async fn limiter_blocks_past_cap() {
        let l = RateLimiter::new(2, Duration::from_millis(150));
        let t0 = Instant::now();
        for _ in 0..3 {
            l.acquire().await;
        }
        assert!(t0.elapsed() >= Duration::from_millis(140));
    }
}
