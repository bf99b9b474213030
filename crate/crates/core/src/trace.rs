//! Trace data model and line-delimited JSON serialization.
//!
//! One [`TraceRecord`] per line. Token texts must concatenate to the raw
//! completion byte-for-byte; records that fail any check are rejected at parse
//! time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Slack allowed on logprob sums and signs.
pub const LOGPROB_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("alignment error: token texts concatenate to {got} bytes, raw_completion has {expected} (first mismatch at byte {at})")]
    Alignment { expected: usize, got: usize, at: usize },
    #[error("value error at token {token}: {reason}")]
    Value { token: usize, reason: String },
}

/// One generated token with whatever probability information the backend exposed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_id: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_bits: Option<f64>,
    /// Natural-log probabilities of the top alternatives, descending.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<Vec<(String, f64)>>,
}

impl TokenRecord {
    pub fn with_entropy(text: impl Into<String>, bits: f64) -> Self {
        Self {
            text: text.into(),
            token_id: None,
            entropy_bits: Some(bits),
            top_logprobs: None,
        }
    }

    pub fn with_top_logprobs(text: impl Into<String>, top: Vec<(String, f64)>) -> Self {
        Self {
            text: text.into(),
            token_id: None,
            entropy_bits: None,
            top_logprobs: Some(top),
        }
    }

    fn validate(&self, index: usize) -> Result<(), TraceError> {
        let err = |reason: String| TraceError::Value { token: index, reason };
        if self.entropy_bits.is_none() && self.top_logprobs.is_none() {
            return Err(err("token has neither entropy_bits nor top_logprobs".into()));
        }
        if let Some(bits) = self.entropy_bits {
            if !bits.is_finite() || bits < 0.0 {
                return Err(err(format!("entropy_bits must be finite and >= 0, got {bits}")));
            }
        }
        if let Some(top) = &self.top_logprobs {
            validate_top_logprobs(top).map_err(err)?;
        }
        Ok(())
    }
}

/// Checks the top-logprob invariants: non-empty, non-positive, descending,
/// total probability at most one.
pub fn validate_top_logprobs(top: &[(String, f64)]) -> Result<(), String> {
    if top.is_empty() {
        return Err("top_logprobs is empty".into());
    }
    let mut mass = 0.0;
    for (i, (_, lp)) in top.iter().enumerate() {
        if lp.is_nan() || *lp == f64::INFINITY {
            return Err(format!("logprob {i} is not a number"));
        }
        if *lp > LOGPROB_TOLERANCE {
            return Err(format!("logprob {i} is positive ({lp})"));
        }
        if i > 0 && *lp > top[i - 1].1 {
            return Err(format!("top_logprobs not descending at position {i}"));
        }
        mass += lp.exp();
    }
    if mass > 1.0 + LOGPROB_TOLERANCE {
        return Err(format!("top_logprobs mass {mass} exceeds 1"));
    }
    Ok(())
}

/// One problem instance and its full generated completion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub id: String,
    pub problem: String,
    pub raw_completion: String,
    pub tokens: Vec<TokenRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, Value>,
}

impl TraceRecord {
    /// Builds a record whose raw completion is the concatenation of `tokens`.
    pub fn from_tokens(
        id: impl Into<String>,
        problem: impl Into<String>,
        tokens: Vec<TokenRecord>,
    ) -> Self {
        let raw_completion = tokens.iter().map(|t| t.text.as_str()).collect();
        Self {
            id: id.into(),
            problem: problem.into(),
            raw_completion,
            tokens,
            ground_truth: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if self.id.is_empty() {
            return Err(TraceError::Schema("id must be non-empty".into()));
        }
        for (i, token) in self.tokens.iter().enumerate() {
            token.validate(i)?;
        }
        check_alignment(&self.raw_completion, &self.tokens)
    }

    /// Byte offset of every token start, plus the total length as last entry.
    pub fn token_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.tokens.len() + 1);
        let mut at = 0;
        offsets.push(0);
        for t in &self.tokens {
            at += t.text.len();
            offsets.push(at);
        }
        offsets
    }
}

fn check_alignment(raw: &str, tokens: &[TokenRecord]) -> Result<(), TraceError> {
    let raw = raw.as_bytes();
    let mut at = 0usize;
    for t in tokens {
        let bytes = t.text.as_bytes();
        let end = at + bytes.len();
        if end > raw.len() || &raw[at..end] != bytes {
            let mismatch = bytes
                .iter()
                .zip(raw.get(at..).unwrap_or(&[]))
                .position(|(a, b)| a != b)
                .unwrap_or_else(|| bytes.len().min(raw.len().saturating_sub(at)));
            let got = tokens.iter().map(|t| t.text.len()).sum();
            return Err(TraceError::Alignment { expected: raw.len(), got, at: at + mismatch });
        }
        at = end;
    }
    if at != raw.len() {
        return Err(TraceError::Alignment { expected: raw.len(), got: at, at });
    }
    Ok(())
}

#[derive(Deserialize)]
struct WireTrace {
    id: String,
    problem: String,
    raw_completion: String,
    tokens: Vec<TokenRecord>,
    #[serde(default)]
    ground_truth: Option<String>,
    #[serde(default)]
    meta: Option<BTreeMap<String, Value>>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

/// Parses and validates one serialized trace line.
///
/// Unknown top-level fields are moved into `meta` (under `extra.<name>` if
/// the name is already taken there).
pub fn parse_trace_line(line: &str) -> Result<TraceRecord, TraceError> {
    let wire: WireTrace =
        serde_json::from_str(line.trim_end_matches(['\r', '\n'])).map_err(|e| TraceError::Schema(e.to_string()))?;
    let mut meta = wire.meta.unwrap_or_default();
    for (key, value) in wire.extra {
        if meta.contains_key(&key) {
            meta.insert(format!("extra.{key}"), value);
        } else {
            meta.insert(key, value);
        }
    }
    let record = TraceRecord {
        id: wire.id,
        problem: wire.problem,
        raw_completion: wire.raw_completion,
        tokens: wire.tokens,
        ground_truth: wire.ground_truth,
        meta,
    };
    record.validate()?;
    Ok(record)
}

/// Serializes a record as a single JSON line (no trailing newline).
pub fn serialize_trace(record: &TraceRecord) -> String {
    serde_json::to_string(record).expect("trace records always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TraceRecord {
        let mut r = TraceRecord::from_tokens(
            "t1",
            "Q",
            vec![
                TokenRecord::with_entropy("<think>", 0.0),
                TokenRecord::with_top_logprobs("A", vec![("A".into(), -0.1), ("B".into(), -2.5)]),
                TokenRecord::with_entropy("</think>", 0.0),
            ],
        );
        r.ground_truth = Some("42".into());
        r.meta.insert("model".into(), Value::String("m".into()));
        r
    }

    #[test]
    fn round_trip_and_determinism() {
        let r = sample();
        let a = serialize_trace(&r);
        let b = serialize_trace(&r);
        assert_eq!(a, b);
        assert!(!a.contains('\n'));
        assert_eq!(parse_trace_line(&a).unwrap(), r);
    }

    #[test]
    fn minimal_record_has_required_keys() {
        let r = TraceRecord::from_tokens("x", "p", vec![TokenRecord::with_entropy("z", 0.5)]);
        let line = serialize_trace(&r);
        for key in ["\"id\"", "\"problem\"", "\"tokens\""] {
            assert!(line.contains(key), "{line}");
        }
    }

    #[test]
    fn missing_tokens_is_schema_error() {
        let line = r#"{"id":"a","problem":"p","raw_completion":"x"}"#;
        assert!(matches!(parse_trace_line(line), Err(TraceError::Schema(_))));
    }

    #[test]
    fn misaligned_tokens_rejected() {
        let line = r#"{"id":"a","problem":"p","raw_completion":"abd","tokens":[{"text":"ab","entropy_bits":0.1},{"text":"c","entropy_bits":0.1}]}"#;
        match parse_trace_line(line) {
            Err(TraceError::Alignment { at, .. }) => assert_eq!(at, 2),
            other => panic!("{other:?}"),
        }
        let short = r#"{"id":"a","problem":"p","raw_completion":"abc","tokens":[{"text":"ab","entropy_bits":0.1}]}"#;
        assert!(matches!(parse_trace_line(short), Err(TraceError::Alignment { .. })));
    }

    #[test]
    fn value_errors() {
        let neg = r#"{"id":"a","problem":"p","raw_completion":"a","tokens":[{"text":"a","entropy_bits":-1.0}]}"#;
        assert!(matches!(parse_trace_line(neg), Err(TraceError::Value { .. })));
        let none = r#"{"id":"a","problem":"p","raw_completion":"a","tokens":[{"text":"a"}]}"#;
        assert!(matches!(parse_trace_line(none), Err(TraceError::Value { .. })));
        let ascending = r#"{"id":"a","problem":"p","raw_completion":"a","tokens":[{"text":"a","top_logprobs":[["a",-2.0],["b",-1.0]]}]}"#;
        assert!(matches!(parse_trace_line(ascending), Err(TraceError::Value { .. })));
        let heavy = r#"{"id":"a","problem":"p","raw_completion":"a","tokens":[{"text":"a","top_logprobs":[["a",-0.1],["b",-0.2]]}]}"#;
        assert!(matches!(parse_trace_line(heavy), Err(TraceError::Value { .. })));
        let empty_id = r#"{"id":"","problem":"p","raw_completion":"a","tokens":[{"text":"a","entropy_bits":0.0}]}"#;
        assert!(matches!(parse_trace_line(empty_id), Err(TraceError::Schema(_))));
    }

    #[test]
    fn unknown_fields_land_in_meta() {
        let line = r#"{"id":"a","problem":"p","raw_completion":"a","tokens":[{"text":"a","entropy_bits":0.0}],"source":"vllm","meta":{"model":"m"}}"#;
        let r = parse_trace_line(line).unwrap();
        assert_eq!(r.meta["source"], "vllm");
        assert_eq!(r.meta["model"], "m");
        let again = parse_trace_line(&serialize_trace(&r)).unwrap();
        assert_eq!(again, r);
    }
}
