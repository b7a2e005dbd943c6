//! Deterministic scripted responder, served over HTTP or used in-process.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, LazyLock, Mutex};
use std::time::Instant;

use async_trait::async_trait;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::client::{ChatModel, ChatResponse, GatewayError, Usage, WireQuery};
use crate::prompt::PromptBundle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "match", rename_all = "snake_case")]
pub enum Matcher {
    Any,
    Contains { text: String },
    Regex { pattern: String },
    MinImages { count: usize },
    MaxImages { count: usize },
}

impl Matcher {
    fn matches(&self, q: &WireQuery) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::Contains { text } => q.text.contains(text.as_str()),
            Matcher::Regex { pattern } => Regex::new(pattern).is_ok_and(|r| r.is_match(&q.text)),
            Matcher::MinImages { count } => q.image_count >= *count,
            Matcher::MaxImages { count } => q.image_count <= *count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Builtin {
    /// Answers ego segment-action questions from the motion summary lines in the prompt.
    SummaryOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockReply {
    Text { text: String },
    Status { status: u16, #[serde(default)] body: String },
    Builtin { responder: Builtin },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(flatten)]
    pub matcher: Matcher,
    pub reply: MockReply,
    /// The rule retires after this many uses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<usize>,
}

fn default_reply() -> String {
    "OK".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default = "default_reply")]
    pub default_response: String,
}

impl Default for MockScript {
    fn default() -> Self {
        Self { rules: Vec::new(), default_response: default_reply() }
    }
}

impl MockScript {
    pub fn with_default(text: impl Into<String>) -> Self {
        Self { rules: Vec::new(), default_response: text.into() }
    }

    pub fn rule(mut self, matcher: Matcher, reply: MockReply) -> Self {
        self.rules.push(MockRule { matcher, reply, times: None });
        self
    }

    pub fn rule_times(mut self, matcher: Matcher, reply: MockReply, times: usize) -> Self {
        self.rules.push(MockRule { matcher, reply, times: Some(times) });
        self
    }

    /// Default script for hermetic runs: the summary oracle, falling back to `fallback`.
    pub fn summary_oracle(fallback: impl Into<String>) -> Self {
        Self::with_default(fallback).rule(Matcher::Any, MockReply::Builtin { responder: Builtin::SummaryOracle })
    }
}

/// What the responder decided: HTTP status and body text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub status: u16,
    pub text: String,
}

/// Stateful evaluator of a [`MockScript`]; rule use counts live here.
#[derive(Debug)]
pub struct ScriptRunner {
    script: MockScript,
    uses: Mutex<Vec<usize>>,
}

impl ScriptRunner {
    pub fn new(script: MockScript) -> Self {
        let n = script.rules.len();
        Self { script, uses: Mutex::new(vec![0; n]) }
    }

    /// First matching live rule wins; builtins that decline fall through to later rules.
    pub fn respond(&self, q: &WireQuery) -> Reply {
        let mut uses = self.uses.lock().expect("mock lock");
        for (i, rule) in self.script.rules.iter().enumerate() {
            if rule.times.is_some_and(|t| uses[i] >= t) || !rule.matcher.matches(q) {
                continue;
            }
            let reply = match &rule.reply {
                MockReply::Text { text } => Some(Reply { status: 200, text: text.clone() }),
                MockReply::Status { status, body } => Some(Reply { status: *status, text: body.clone() }),
                MockReply::Builtin { responder: Builtin::SummaryOracle } => {
                    summary_oracle(&q.text).map(|text| Reply { status: 200, text })
                }
            };
            if let Some(r) = reply {
                uses[i] += 1;
                return r;
            }
        }
        Reply { status: 200, text: self.script.default_response.clone() }
    }
}

static SUMMARY_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"Motion summary for Frame(\d+) to Frame(\d+): The ego-vehicle is ([^.\n]+)\.").unwrap());
static FRAME_LABEL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^Frame(\d+):\s*$").unwrap());
static OPTION_MARK: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?:^|\s)([A-D])\. ").unwrap());

/// Options listed after the letter instruction, as `(letter, text)`.
pub fn parse_options(text: &str) -> Vec<(char, String)> {
    let Some(pos) = text.rfind("corresponding to the correct option.") else { return Vec::new() };
    let tail = &text[pos + "corresponding to the correct option.".len()..];
    let tail = tail.lines().next().unwrap_or_default();
    let marks: Vec<(usize, usize, char)> = OPTION_MARK
        .captures_iter(tail)
        .map(|c| {
            let m = c.get(0).expect("match");
            (m.start(), m.end(), c[1].chars().next().expect("letter"))
        })
        .collect();
    marks
        .iter()
        .enumerate()
        .map(|(i, (_, end, letter))| {
            let stop = marks.get(i + 1).map_or(tail.len(), |m| m.0);
            let body = tail[*end..stop].trim();
            (*letter, body.strip_suffix('.').unwrap_or(body).to_string())
        })
        .collect()
}

fn normalize(s: &str) -> String {
    s.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Answers an ego segment question by matching the prompt's labeled frame span
/// against the summary lines. Declines anything else.
pub fn summary_oracle(text: &str) -> Option<String> {
    if !text.contains("the ego vehicle in this video segment") {
        return None;
    }
    let lines: Vec<(u32, u32, String)> = SUMMARY_LINE
        .captures_iter(text)
        .map(|c| (c[1].parse().unwrap_or(0), c[2].parse().unwrap_or(0), c[3].trim().to_string()))
        .collect();
    let labels: Vec<u32> = FRAME_LABEL.captures_iter(text).filter_map(|c| c[1].parse().ok()).collect();
    let (lo, hi) = (*labels.iter().min()?, *labels.iter().max()?);
    let overlap = |a: u32, b: u32| (hi.min(b) as i64 - lo.max(a) as i64 + 1).max(0);
    let (_, _, phrase) = lines
        .iter()
        .filter(|(a, b, _)| overlap(*a, *b) > 0)
        .max_by_key(|(a, b, _)| (((*a, *b) == (lo, hi)), overlap(*a, *b), std::cmp::Reverse(*a)))?;
    if text.contains("Respond with exactly one letter") {
        let want = normalize(phrase);
        parse_options(text).into_iter().find(|(_, o)| normalize(o) == want).map(|(l, _)| l.to_string())
    } else {
        Some(phrase.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedRequest {
    /// Milliseconds since the server started.
    pub at_ms: f64,
    pub query: WireQuery,
    pub status: u16,
}

struct MockState {
    runner: ScriptRunner,
    started: Instant,
    log: Mutex<Vec<RecordedRequest>>,
}

/// Handle to a running mock server.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    shutdown: Mutex<Option<oneshot::Sender<()>>>,
    task: tokio::sync::Mutex<Option<JoinHandle<()>>>,
}

impl MockServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.log.lock().expect("log lock").clone()
    }

    /// Stops accepting connections; calling twice is harmless.
    pub async fn shutdown(&self) {
        if let Some(tx) = self.shutdown.lock().expect("shutdown lock").take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.lock().await.take() {
            let _ = task.await;
        }
    }
}

async fn chat_completions(State(state): State<Arc<MockState>>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let query = WireQuery::from_body(&body);
    let reply = state.runner.respond(&query);
    state.log.lock().expect("log lock").push(RecordedRequest {
        at_ms: state.started.elapsed().as_secs_f64() * 1e3,
        query: query.clone(),
        status: reply.status,
    });
    let status = StatusCode::from_u16(reply.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    if !status.is_success() {
        return (status, Json(json!({"error": {"message": reply.text}})));
    }
    let body = json!({
        "id": "mock",
        "object": "chat.completion",
        "model": body["model"],
        "choices": [{"index": 0, "message": {"role": "assistant", "content": reply.text}, "finish_reason": "stop"}],
        "usage": {
            "prompt_tokens": query.text.split_whitespace().count(),
            "completion_tokens": reply.text.split_whitespace().count(),
        },
    });
    (status, Json(body))
}

async fn recorded(State(state): State<Arc<MockState>>) -> Json<Vec<RecordedRequest>> {
    Json(state.log.lock().expect("log lock").clone())
}

/// Serves the script on `127.0.0.1:port` (0 picks a free port).
pub async fn serve_mock(script: MockScript, port: u16) -> Result<MockServer, GatewayError> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port))
        .await
        .map_err(|e| GatewayError::InvalidConfig(format!("cannot bind mock on port {port}: {e}")))?;
    let addr = listener.local_addr().map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
    let state = Arc::new(MockState { runner: ScriptRunner::new(script), started: Instant::now(), log: Mutex::new(Vec::new()) });
    let app = Router::new()
        .route("/v1/chat/completions", post(chat_completions))
        .route("/requests", get(recorded))
        .route("/health", get(|| async { "ok" }))
        .with_state(state.clone());
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let served = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = rx.await;
        });
        if let Err(e) = served.await {
            log::error!("mock server stopped: {e}");
        }
    });
    Ok(MockServer { addr, state, shutdown: Mutex::new(Some(tx)), task: tokio::sync::Mutex::new(Some(task)) })
}

/// In-process scripted model that counts and records every call.
pub struct ScriptedModel {
    id: String,
    runner: ScriptRunner,
    calls: AtomicUsize,
    log: Mutex<Vec<WireQuery>>,
}

impl ScriptedModel {
    pub fn new(id: impl Into<String>, script: MockScript) -> Self {
        Self { id: id.into(), runner: ScriptRunner::new(script), calls: AtomicUsize::new(0), log: Mutex::new(Vec::new()) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn queries(&self) -> Vec<WireQuery> {
        self.log.lock().expect("log lock").clone()
    }
}

#[async_trait]
impl ChatModel for ScriptedModel {
    fn model_id(&self) -> &str {
        &self.id
    }

    async fn chat(&self, prompt: &PromptBundle) -> Result<ChatResponse, GatewayError> {
        if prompt.is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let q = WireQuery::from_prompt(prompt);
        let reply = self.runner.respond(&q);
        self.log.lock().expect("log lock").push(q);
        if reply.status >= 300 {
            return Err(GatewayError::Model { status: reply.status, body: reply.text });
        }
        Ok(ChatResponse { text: reply.text, usage: Usage::default() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(text: &str) -> WireQuery {
        WireQuery { text: text.to_string(), image_count: 0 }
    }

    #[test]
    fn first_matching_rule_wins_and_default_applies() {
        let runner = ScriptRunner::new(
            MockScript::with_default("fallback")
                .rule(Matcher::Contains { text: "Frame1".into() }, MockReply::Text { text: "one".into() })
                .rule(Matcher::Any, MockReply::Text { text: "any".into() }),
        );
        assert_eq!(runner.respond(&q("see Frame1")).text, "one");
        assert_eq!(runner.respond(&q("nothing")).text, "any");
        let empty = ScriptRunner::new(MockScript::with_default("fallback"));
        assert_eq!(empty.respond(&q("x")).text, "fallback");
    }

    #[test]
    fn rules_retire_after_their_budget() {
        let runner = ScriptRunner::new(MockScript::default().rule_times(
            Matcher::Any,
            MockReply::Status { status: 429, body: "slow down".into() },
            2,
        ));
        assert_eq!(runner.respond(&q("a")).status, 429);
        assert_eq!(runner.respond(&q("a")).status, 429);
        assert_eq!(runner.respond(&q("a")), Reply { status: 200, text: "OK".into() });
    }

    #[test]
    fn script_json_round_trip() {
        let script = MockScript::summary_oracle("A").rule_times(
            Matcher::Regex { pattern: "^x".into() },
            MockReply::Status { status: 500, body: String::new() },
            1,
        );
        let text = serde_json::to_string(&script).unwrap();
        assert_eq!(serde_json::from_str::<MockScript>(&text).unwrap(), script);
    }

    const SUMMARY: &str = "Motion summary for Frame0 to Frame9: The ego-vehicle is stopped.\n\
Motion summary for Frame3 to Frame12: The ego-vehicle is turn left.";

    #[test]
    fn oracle_answers_phrase_and_letter() {
        let frames: String = (3..=12).map(|i| format!("Frame{i}:\n")).collect();
        let exact = format!("{frames}{SUMMARY}\nWhat best describes the motion of the ego vehicle in this video segment? Respond with exactly one full phrase from the following list: 'Starting'");
        assert_eq!(summary_oracle(&exact).as_deref(), Some("turn left"));
        let mc = format!("{frames}{SUMMARY}\nWhat is the motion of the ego vehicle in this video segment? Respond with exactly one letter corresponding to the correct option. A. Stopped. B. Turn left. C. Straight, constant speed. D. Starting.");
        assert_eq!(summary_oracle(&mc).as_deref(), Some("B"));
        assert_eq!(summary_oracle("What is the motion of the bus visible in this video segment?"), None);
    }

    #[test]
    fn option_parsing_handles_commas() {
        let opts = parse_options("Q? Respond with exactly one letter corresponding to the correct option. A. Straight, constant speed. B. Stopped.");
        assert_eq!(opts, vec![('A', "Straight, constant speed".to_string()), ('B', "Stopped".to_string())]);
    }
}
