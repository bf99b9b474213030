//! Composite reward for compressed-reasoning completions: correctness, a
//! tiered skip-ratio bonus, a skip-count penalty and a length penalty.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::prune::DEFAULT_SKIP_TOKEN;
use crate::segment::{split_steps, THINK_CLOSE, THINK_OPEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub kappa_high: f64,
    pub kappa_low: f64,
    pub tau_skip_num: u64,
    pub tau_length: u64,
    pub correct_reward: f64,
    pub skip_high_reward: f64,
    pub skip_mid_reward: f64,
    pub penalty: f64,
    pub skip_token: String,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            kappa_high: 0.8,
            kappa_low: 0.5,
            tau_skip_num: 100,
            tau_length: 3500,
            correct_reward: 2.0,
            skip_high_reward: 1.0,
            skip_mid_reward: 0.5,
            penalty: -1.0,
            skip_token: DEFAULT_SKIP_TOKEN.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid reward config: {0}")]
pub struct RewardConfigError(String);

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardConfigError> {
        if !(0.0 <= self.kappa_low && self.kappa_low <= self.kappa_high && self.kappa_high <= 1.0) {
            return Err(RewardConfigError(format!(
                "need 0 <= kappa_low ({}) <= kappa_high ({}) <= 1",
                self.kappa_low, self.kappa_high
            )));
        }
        Ok(())
    }
}

/// Decides whether an extracted answer matches the ground truth.
pub trait AnswerComparator: Send + Sync {
    fn matches(&self, extracted: &str, ground_truth: &str) -> bool;
}

/// String equality after normalization, falling back to exact rational
/// equality when both sides parse as numbers.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizedComparator;

impl AnswerComparator for NormalizedComparator {
    fn matches(&self, extracted: &str, ground_truth: &str) -> bool {
        let (a, b) = (normalize_answer(extracted), normalize_answer(ground_truth));
        if a.is_empty() || b.is_empty() {
            return false;
        }
        if a == b {
            return true;
        }
        match (parse_rational(&a), parse_rational(&b)) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        }
    }
}

fn thousands_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^-?\d{1,3}(,\d{3})+(\.\d+)?$").unwrap())
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:,\d{3})*(?:\.\d+)?(?:/\d+)?").unwrap())
}

fn frac_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(-?)\\[dt]?frac\{(-?\d+)\}\{(-?\d+)\}$").unwrap())
}

/// Strips whitespace and surrounding `$`, and drops thousands separators.
pub fn normalize_answer(s: &str) -> String {
    let mut t = s.trim();
    loop {
        let stripped = t.trim_start_matches('$').trim_end_matches('$').trim();
        if stripped == t {
            break;
        }
        t = stripped;
    }
    if thousands_re().is_match(t) {
        t.replace(',', "")
    } else {
        t.to_string()
    }
}

fn parse_decimal(s: &str) -> Option<BigRational> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let digits = format!("{int_part}{frac_part}");
    let numer: BigInt = if digits.is_empty() { BigInt::zero() } else { digits.parse().ok()? };
    let denom = num_traits::pow(BigInt::from(10), frac_part.len());
    let value = BigRational::new(numer, denom);
    Some(if neg { -value } else { value })
}

/// Parses integers, decimals, `a/b` and `\frac{a}{b}` exactly.
pub fn parse_rational(s: &str) -> Option<BigRational> {
    let s = s.trim();
    if let Some(c) = frac_re().captures(s) {
        let n: BigInt = c[2].parse().ok()?;
        let d: BigInt = c[3].parse().ok()?;
        if d.is_zero() {
            return None;
        }
        let v = BigRational::new(n, d);
        return Some(if &c[1] == "-" { -v } else { v });
    }
    if let Some((n, d)) = s.split_once('/') {
        let n = parse_decimal(n.trim())?;
        let d = parse_decimal(d.trim())?;
        if d.is_zero() {
            return None;
        }
        return Some(n / d);
    }
    parse_decimal(s)
}

/// Contents of every balanced `\boxed{...}` group, in order.
fn boxed_groups(text: &str) -> Vec<&str> {
    const OPEN: &str = "\\boxed{";
    let mut out = Vec::new();
    for (at, _) in text.match_indices(OPEN) {
        let start = at + OPEN.len();
        let mut depth = 1usize;
        for (i, c) in text[start..].char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        out.push(&text[start..start + i]);
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    out
}

/// The last boxed answer, or failing that the last number after `</think>`
/// (the whole text when there is no closing tag).
pub fn extract_answer(completion: &str) -> Option<String> {
    if let Some(last) = boxed_groups(completion).last() {
        let n = normalize_answer(last);
        return (!n.is_empty()).then_some(n);
    }
    let region = match completion.rfind(THINK_CLOSE) {
        Some(at) => &completion[at + THINK_CLOSE.len()..],
        None => completion,
    };
    number_re().find_iter(region).last().map(|m| normalize_answer(m.as_str()))
}

/// The thinking region of a completion. The opening tag is optional since it
/// usually lives in the prompt.
pub fn think_region(completion: &str) -> &str {
    let start = completion.find(THINK_OPEN).map_or(0, |i| i + THINK_OPEN.len());
    let end = completion[start..].find(THINK_CLOSE).map_or(completion.len(), |i| start + i);
    &completion[start..end]
}

pub fn correctness_reward(
    completion: &str,
    ground_truth: &str,
    config: &RewardConfig,
    comparator: &dyn AnswerComparator,
) -> f64 {
    match extract_answer(completion) {
        Some(a) if comparator.matches(&a, ground_truth) => config.correct_reward,
        _ => 0.0,
    }
}

/// Tiered reward on the fraction of steps that are skip markers.
/// Returns `(reward, n_skip, n_steps)`.
pub fn skip_ratio_reward(think_text: &str, config: &RewardConfig) -> (f64, usize, usize) {
    let steps = split_steps(think_text);
    let n_steps = steps.len();
    let n_skip = steps
        .iter()
        .filter(|r| think_text[(*r).clone()].trim() == config.skip_token)
        .count();
    (tier(ratio(n_skip, n_steps), config), n_skip, n_steps)
}

fn ratio(n_skip: usize, n_steps: usize) -> f64 {
    n_skip as f64 / n_steps.max(1) as f64
}

fn tier(ratio: f64, config: &RewardConfig) -> f64 {
    if ratio >= config.kappa_high {
        config.skip_high_reward
    } else if ratio >= config.kappa_low {
        config.skip_mid_reward
    } else {
        0.0
    }
}

pub fn skip_num_penalty(n_skip: usize, config: &RewardConfig) -> f64 {
    if n_skip as u64 > config.tau_skip_num {
        config.penalty
    } else {
        0.0
    }
}

pub fn length_penalty(response_tokens: usize, config: &RewardConfig) -> f64 {
    if response_tokens as u64 > config.tau_length {
        config.penalty
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCountSource {
    Backend,
    /// No count supplied; whitespace-separated words were counted instead.
    Whitespace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardDiagnostics {
    pub n_skip: usize,
    pub n_steps: usize,
    pub ratio: f64,
    /// Tokens of the whole completion, not only the think region.
    pub response_tokens: usize,
    pub token_count_source: TokenCountSource,
    pub extracted_answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub correctness: f64,
    pub skip_ratio_reward: f64,
    pub skip_num_penalty: f64,
    pub length_penalty: f64,
    pub total: f64,
    pub diagnostics: RewardDiagnostics,
}

pub fn score(
    completion: &str,
    ground_truth: &str,
    token_count: Option<usize>,
    config: &RewardConfig,
    comparator: &dyn AnswerComparator,
) -> RewardBreakdown {
    let extracted = extract_answer(completion);
    let correctness = match &extracted {
        Some(a) if !ground_truth.trim().is_empty() && comparator.matches(a, ground_truth) => {
            config.correct_reward
        }
        _ => 0.0,
    };
    let (skip_ratio, n_skip, n_steps) = skip_ratio_reward(think_region(completion), config);
    let (response_tokens, token_count_source) = match token_count {
        Some(n) => (n, TokenCountSource::Backend),
        None => (completion.split_whitespace().count(), TokenCountSource::Whitespace),
    };
    let skip_num = skip_num_penalty(n_skip, config);
    let length = length_penalty(response_tokens, config);
    RewardBreakdown {
        correctness,
        skip_ratio_reward: skip_ratio,
        skip_num_penalty: skip_num,
        length_penalty: length,
        total: correctness + skip_ratio + skip_num + length,
        diagnostics: RewardDiagnostics {
            n_skip,
            n_steps,
            ratio: ratio(n_skip, n_steps),
            response_tokens,
            token_count_source,
            extracted_answer: extracted,
        },
    }
}

/// Flat per-completion output line of the `reward` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardLine {
    pub id: String,
    pub total: f64,
    pub correctness: f64,
    pub skip_ratio_reward: f64,
    pub skip_num_penalty: f64,
    pub length_penalty: f64,
    pub n_skip: usize,
    pub n_steps: usize,
    pub response_tokens: usize,
}

impl RewardLine {
    pub fn new(id: impl Into<String>, b: &RewardBreakdown) -> Self {
        Self {
            id: id.into(),
            total: b.total,
            correctness: b.correctness,
            skip_ratio_reward: b.skip_ratio_reward,
            skip_num_penalty: b.skip_num_penalty,
            length_penalty: b.length_penalty,
            n_skip: b.diagnostics.n_skip,
            n_steps: b.diagnostics.n_steps,
            response_tokens: b.diagnostics.response_tokens,
        }
    }
}
