//! In-process mock of an OpenAI-compatible `/v1/completions` endpoint.
//!
//! Completions come from a [`MockResponder`]. The server counts requests in
//! flight and records every moment the count exceeded the configured limit.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Map, Value};
use tokio::sync::oneshot;

#[derive(Debug, Clone, PartialEq)]
pub struct MockToken {
    pub text: String,
    /// Descending natural-log probabilities; the emitted token need not be first.
    pub top: Vec<(String, f64)>,
}

pub trait MockResponder: Send + Sync + 'static {
    /// Full completion for `prompt`, or `None` to answer 400.
    fn respond(&self, prompt: &str) -> Option<Vec<MockToken>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogprobLayout {
    /// `tokens` / `token_logprobs` / `top_logprobs` arrays.
    #[default]
    Legacy,
    /// `content: [{token, logprob, top_logprobs}]`.
    Content,
}

#[derive(Debug, Clone, Default)]
pub struct MockOptions {
    pub delay_ms: u64,
    pub omit_logprobs: bool,
    /// Required bearer key; requests without it get 401.
    pub api_key: Option<String>,
    /// Answer this many requests with 500 before serving normally.
    pub fail_first: usize,
    pub in_flight_limit: Option<usize>,
    pub layout: LogprobLayout,
}

#[derive(Debug, Default)]
pub struct MockStats {
    pub requests: AtomicUsize,
    pub in_flight: AtomicUsize,
    pub max_in_flight: AtomicUsize,
    pub violations: AtomicUsize,
    failures_served: AtomicUsize,
}

impl MockStats {
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }
    pub fn violations(&self) -> usize {
        self.violations.load(Ordering::SeqCst)
    }
}

struct Shared {
    responder: Arc<dyn MockResponder>,
    options: MockOptions,
    stats: Arc<MockStats>,
}

struct InFlight<'a>(&'a MockStats);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

fn error(status: StatusCode, message: &str) -> Response {
    (status, Json(json!({"error": {"message": message}}))).into_response()
}

fn chosen_logprob(token: &MockToken) -> Value {
    token
        .top
        .iter()
        .find(|(t, _)| *t == token.text)
        .map_or(Value::Null, |(_, lp)| json!(lp))
}

fn logprobs_body(tokens: &[MockToken], k: usize, layout: LogprobLayout) -> Value {
    match layout {
        LogprobLayout::Legacy => {
            let tops: Vec<Value> = tokens
                .iter()
                .map(|t| {
                    let mut m = Map::new();
                    for (alt, lp) in t.top.iter().take(k) {
                        m.insert(alt.clone(), json!(lp));
                    }
                    Value::Object(m)
                })
                .collect();
            json!({
                "tokens": tokens.iter().map(|t| t.text.as_str()).collect::<Vec<_>>(),
                "token_logprobs": tokens.iter().map(chosen_logprob).collect::<Vec<_>>(),
                "top_logprobs": tops,
            })
        }
        LogprobLayout::Content => {
            let content: Vec<Value> = tokens
                .iter()
                .map(|t| {
                    json!({
                        "token": t.text,
                        "logprob": chosen_logprob(t),
                        "top_logprobs": t.top.iter().take(k)
                            .map(|(alt, lp)| json!({"token": alt, "logprob": lp}))
                            .collect::<Vec<_>>(),
                    })
                })
                .collect();
            json!({ "content": content })
        }
    }
}

async fn completions(State(shared): State<Arc<Shared>>, headers: HeaderMap, Json(body): Json<Value>) -> Response {
    let stats = &shared.stats;
    let options = &shared.options;
    stats.requests.fetch_add(1, Ordering::SeqCst);
    if let Some(key) = &options.api_key {
        let expected = format!("Bearer {key}");
        if headers.get("authorization").and_then(|v| v.to_str().ok()) != Some(expected.as_str()) {
            return error(StatusCode::UNAUTHORIZED, "invalid api key");
        }
    }
    let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    let _guard = InFlight(stats);
    stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
    if options.in_flight_limit.is_some_and(|limit| now > limit) {
        stats.violations.fetch_add(1, Ordering::SeqCst);
    }
    if options.delay_ms > 0 {
        tokio::time::sleep(Duration::from_millis(options.delay_ms)).await;
    }
    if stats.failures_served.fetch_add(1, Ordering::SeqCst) < options.fail_first {
        return error(StatusCode::INTERNAL_SERVER_ERROR, "injected failure");
    }
    let Some(prompt) = body["prompt"].as_str() else {
        return error(StatusCode::BAD_REQUEST, "prompt must be a string");
    };
    let Some(mut tokens) = shared.responder.respond(prompt) else {
        return error(StatusCode::BAD_REQUEST, "unrecognised prompt");
    };
    let max_tokens = body["max_tokens"].as_u64().unwrap_or(16) as usize;
    let finish_reason = if tokens.len() > max_tokens {
        tokens.truncate(max_tokens);
        "length"
    } else {
        "stop"
    };
    let text: String = tokens.iter().map(|t| t.text.as_str()).collect();
    let logprobs = match body["logprobs"].as_u64() {
        Some(k) if !options.omit_logprobs => logprobs_body(&tokens, k as usize, options.layout),
        _ => Value::Null,
    };
    Json(json!({
        "id": "cmpl-mock",
        "object": "text_completion",
        "model": body["model"],
        "choices": [{"index": 0, "text": text, "logprobs": logprobs, "finish_reason": finish_reason}],
    }))
    .into_response()
}

pub struct MockServer {
    addr: SocketAddr,
    stats: Arc<MockStats>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds an ephemeral localhost port and serves on a background thread.
    pub fn start(responder: Arc<dyn MockResponder>, options: MockOptions) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stats = Arc::new(MockStats::default());
        let shared = Arc::new(Shared { responder, options, stats: Arc::clone(&stats) });
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .build()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener converts");
                let app = Router::new().route("/v1/completions", post(completions)).with_state(shared);
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self { addr, stats, shutdown: Some(tx), thread: Some(thread) })
    }

    /// Base URL to use as `endpoint_url`.
    pub fn endpoint(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn stats(&self) -> &MockStats {
        &self.stats
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
