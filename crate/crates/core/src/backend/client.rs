//! Blocking client for OpenAI-compatible `/completions` endpoints that return
//! per-token logprobs.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use super::config::{BackendConfig, MAX_ATTEMPTS_CAP, MAX_BACKOFF_MS};
use crate::segment::{THINK_CLOSE, THINK_OPEN};
use crate::trace::{TokenRecord, TraceError, TraceRecord};

/// Upper bound on a response body.
const BODY_LIMIT: u64 = 256 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("authorization rejected (HTTP {0})")]
    Auth(u16),
    #[error("protocol error: {0}")]
    Protocol(String),
    /// The trace is kept, flagged with `meta.truncated = true`.
    #[error("completion {} ended before {THINK_CLOSE}", .0.id)]
    Truncation(Box<TraceRecord>),
    #[error("backend config: {0}")]
    Config(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Anything that can continue a prompt with a final answer.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, BackendError>;
    /// Short description recorded in provenance.
    fn identity(&self) -> String;
}

/// Counting semaphore bounding requests in flight.
struct Gate {
    limit: usize,
    busy: Mutex<usize>,
    cv: Condvar,
}

struct GateGuard<'a>(&'a Gate);

impl Gate {
    fn new(limit: usize) -> Self {
        Self { limit, busy: Mutex::new(0), cv: Condvar::new() }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut busy = self.busy.lock().unwrap_or_else(|e| e.into_inner());
        while *busy >= self.limit {
            busy = self.cv.wait(busy).unwrap_or_else(|e| e.into_inner());
        }
        *busy += 1;
        GateGuard(self)
    }
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut busy = self.0.busy.lock().unwrap_or_else(|e| e.into_inner());
        *busy -= 1;
        self.0.cv.notify_one();
    }
}

/// One token as returned by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct WireToken {
    pub text: String,
    pub logprob: Option<f64>,
    /// Descending natural-log probabilities.
    pub top: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireCompletion {
    pub text: String,
    pub finish_reason: Option<String>,
    pub tokens: Option<Vec<WireToken>>,
}

pub struct CompletionClient {
    config: BackendConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    gate: Gate,
}

impl fmt::Debug for CompletionClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompletionClient")
            .field("endpoint_url", &self.config.endpoint_url)
            .field("model", &self.config.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

fn backoff_ms(base: u64, retry: u32) -> u64 {
    let cap = base.saturating_mul(1u64 << retry.min(32)).min(MAX_BACKOFF_MS);
    rand::random_range(0..=cap)
}

fn sorted_top(mut top: Vec<(String, f64)>) -> Vec<(String, f64)> {
    for entry in &mut top {
        entry.1 = entry.1.min(0.0);
    }
    top.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    top
}

fn parse_content_tokens(content: &[Value]) -> Result<Vec<WireToken>, BackendError> {
    content
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let text = entry["token"]
                .as_str()
                .ok_or_else(|| BackendError::Protocol(format!("logprobs.content[{i}] lacks a token string")))?;
            let top = match entry["top_logprobs"].as_array() {
                Some(alts) => alts
                    .iter()
                    .map(|a| match (a["token"].as_str(), a["logprob"].as_f64()) {
                        (Some(t), Some(lp)) => Ok((t.to_string(), lp)),
                        _ => Err(BackendError::Protocol(format!("malformed top_logprobs at token {i}"))),
                    })
                    .collect::<Result<Vec<_>, _>>()?,
                None => Vec::new(),
            };
            Ok(WireToken { text: text.to_string(), logprob: entry["logprob"].as_f64(), top: sorted_top(top) })
        })
        .collect()
}

fn parse_legacy_tokens(logprobs: &Value) -> Result<Vec<WireToken>, BackendError> {
    let tokens = logprobs["tokens"]
        .as_array()
        .ok_or_else(|| BackendError::Protocol("logprobs lacks a tokens array".into()))?;
    let lps = logprobs["token_logprobs"].as_array();
    let tops = logprobs["top_logprobs"].as_array();
    if lps.is_some_and(|l| l.len() != tokens.len()) || tops.is_some_and(|t| t.len() != tokens.len()) {
        return Err(BackendError::Protocol("logprob arrays differ in length from tokens".into()));
    }
    tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let text = t
                .as_str()
                .ok_or_else(|| BackendError::Protocol(format!("token {i} is not a string")))?;
            let top = match tops.and_then(|t| t[i].as_object()) {
                Some(map) => map
                    .iter()
                    .map(|(k, v)| {
                        v.as_f64()
                            .map(|lp| (k.clone(), lp))
                            .ok_or_else(|| BackendError::Protocol(format!("non-numeric logprob at token {i}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?,
                None => Vec::new(),
            };
            Ok(WireToken {
                text: text.to_string(),
                logprob: lps.and_then(|l| l[i].as_f64()),
                top: sorted_top(top),
            })
        })
        .collect()
}

/// Parses the first choice of a completions response. Both the legacy
/// `tokens`/`token_logprobs`/`top_logprobs` layout and the per-token
/// `content` layout are accepted.
pub fn parse_completion(body: &Value) -> Result<WireCompletion, BackendError> {
    let choice = body["choices"]
        .get(0)
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    let logprobs = &choice["logprobs"];
    let tokens = if logprobs.is_null() {
        None
    } else if let Some(content) = logprobs["content"].as_array() {
        Some(parse_content_tokens(content)?)
    } else {
        Some(parse_legacy_tokens(logprobs)?)
    };
    let text = match (choice["text"].as_str(), &tokens) {
        (Some(t), _) => t.to_string(),
        (None, Some(toks)) => toks.iter().map(|t| t.text.as_str()).collect(),
        (None, None) => return Err(BackendError::Protocol("choice has neither text nor tokens".into())),
    };
    Ok(WireCompletion {
        text,
        finish_reason: choice["finish_reason"].as_str().map(str::to_string),
        tokens,
    })
}

/// The forced opening of every collected completion; it lives in the prompt,
/// so it carries no uncertainty.
pub const FORCED_PREFIX: &str = "<think>\n";

pub fn generation_prompt(problem: &str) -> String {
    format!("{problem}\n{THINK_OPEN}\n")
}

/// A trace to request.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRequest {
    pub id: String,
    pub problem: String,
    pub ground_truth: Option<String>,
}

impl CompletionClient {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate().map_err(BackendError::Config)?;
        let api_key = if config.api_key_env.is_empty() {
            None
        } else {
            match std::env::var(&config.api_key_env) {
                Ok(key) if !key.is_empty() => Some(key),
                _ => {
                    return Err(BackendError::Config(format!(
                        "environment variable {} is not set",
                        config.api_key_env
                    )))
                }
            }
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        Ok(Self { gate: Gate::new(config.max_in_flight), config, agent, api_key })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn post(&self, body: &Value) -> Result<Value, BackendError> {
        let url = format!("{}/completions", self.config.endpoint_url.trim_end_matches('/'));
        let attempts = self.config.retry.max_attempts.clamp(1, MAX_ATTEMPTS_CAP);
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                std::thread::sleep(Duration::from_millis(backoff_ms(self.config.retry.base_backoff_ms, attempt - 1)));
            }
            let _slot = self.gate.enter();
            let mut request = self.agent.post(&url);
            if let Some(key) = &self.api_key {
                request = request.header("Authorization", &format!("Bearer {key}"));
            }
            match request.send_json(body) {
                Ok(mut response) => {
                    let status = response.status().as_u16();
                    match status {
                        200..=299 => {
                            return response
                                .body_mut()
                                .with_config()
                                .limit(BODY_LIMIT)
                                .read_json::<Value>()
                                .map_err(|e| BackendError::Protocol(format!("unreadable response body: {e}")));
                        }
                        401 | 403 => return Err(BackendError::Auth(status)),
                        408 | 429 | 500..=599 => last = format!("HTTP {status}"),
                        _ => return Err(BackendError::Protocol(format!("unexpected HTTP status {status}"))),
                    }
                }
                Err(e) => last = e.to_string(),
            }
            log::debug!("attempt {attempt}/{attempts} to {url} failed: {last}");
        }
        Err(BackendError::Transport { attempts, detail: last })
    }

    fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": self.config.max_tokens,
            "temperature": self.config.temperature,
            "logprobs": self.config.top_logprobs_k,
            "echo": false,
        })
    }

    /// Generates one full trace for `request.problem`.
    pub fn fetch_trace(&self, request: &TraceRequest) -> Result<TraceRecord, BackendError> {
        let body = self.post(&self.request_body(&generation_prompt(&request.problem)))?;
        let completion = parse_completion(&body)?;
        let wire = completion
            .tokens
            .ok_or_else(|| BackendError::Protocol("response lacks logprobs".into()))?;
        let mut tokens = Vec::with_capacity(wire.len() + 1);
        tokens.push(TokenRecord::with_entropy(FORCED_PREFIX, 0.0));
        for (i, t) in wire.into_iter().enumerate() {
            let top = if !t.top.is_empty() {
                t.top
            } else if let Some(lp) = t.logprob {
                vec![(t.text.clone(), lp.min(0.0))]
            } else {
                return Err(BackendError::Protocol(format!("token {i} has no logprobs")));
            };
            tokens.push(TokenRecord::with_top_logprobs(t.text, top));
        }
        let mut record = TraceRecord::from_tokens(request.id.clone(), request.problem.clone(), tokens);
        record.ground_truth = request.ground_truth.clone();
        let meta = &mut record.meta;
        meta.insert("source".into(), json!("backend"));
        meta.insert("model".into(), json!(self.config.model));
        meta.insert("temperature".into(), json!(self.config.temperature));
        meta.insert("max_tokens".into(), json!(self.config.max_tokens));
        meta.insert("top_logprobs_k".into(), json!(self.config.top_logprobs_k));
        meta.insert("finish_reason".into(), json!(completion.finish_reason));
        record.validate()?;
        if !record.raw_completion.contains(THINK_CLOSE) {
            record.meta.insert("truncated".into(), json!(true));
            return Err(BackendError::Truncation(Box::new(record)));
        }
        Ok(record)
    }

    /// Fetches every request with at most `max_in_flight` running at once.
    /// Results come back in request order.
    pub fn fetch_many(&self, requests: &[TraceRequest]) -> Vec<Result<TraceRecord, BackendError>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<TraceRecord, BackendError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.config.max_in_flight.min(requests.len()).max(1);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= requests.len() {
                        break;
                    }
                    let result = self.fetch_trace(&requests[i]);
                    *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every slot is filled"))
            .collect()
    }
}

impl CompletionBackend for CompletionClient {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let body = self.post(&self.request_body(prompt))?;
        Ok(parse_completion(&body)?.text)
    }

    fn identity(&self) -> String {
        format!("completions:{}@{}", self.config.model, self.config.endpoint_url)
    }
}
