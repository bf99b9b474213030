//! Token and step entropy, in bits.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::segment::SegmentedTrace;
use crate::trace::{validate_top_logprobs, TokenRecord};

/// Probabilities below this are treated as exactly zero.
pub const PROB_FLOOR: f64 = 1e-15;
/// Allowed deviation of a distribution's sum from one before it is an error.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;
/// Tail mass above which a top-k entropy counts as a lower bound.
pub const TAIL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EntropyError {
    #[error("invalid distribution: {0}")]
    Value(String),
    #[error("token span {start}..{end} out of bounds for {len} tokens")]
    Range { start: usize, end: usize, len: usize },
    #[error("token {0} has neither entropy_bits nor top_logprobs")]
    MissingEntropySource(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Every token entropy is the full-distribution value.
    Exact,
    /// At least one token was computed from truncated logprobs.
    TopKLowerBound,
}

fn plogp_sum(probs: impl Iterator<Item = f64>) -> f64 {
    let h: f64 = probs
        .filter(|&p| p >= PROB_FLOOR)
        .map(|p| -p * p.log2())
        .sum();
    h.max(0.0)
}

/// Shannon entropy of a (nearly) normalized distribution.
pub fn token_entropy_from_distribution(probs: &[f64]) -> Result<f64, EntropyError> {
    if probs.is_empty() {
        return Err(EntropyError::Value("empty distribution".into()));
    }
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(EntropyError::Value(format!("entry {p} is not a probability")));
    }
    let sum: f64 = probs.iter().sum();
    if sum <= 0.0 {
        return Err(EntropyError::Value("distribution sums to zero".into()));
    }
    if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(EntropyError::Value(format!("distribution sums to {sum}")));
    }
    let h = plogp_sum(probs.iter().map(|p| p / sum));
    Ok(h.min((probs.len() as f64).log2()))
}

/// Entropy from truncated natural-log probabilities, with the unobserved
/// remainder lumped into one outcome. Returns the entropy and the tail mass.
pub fn token_entropy_from_topk(top_logprobs: &[(String, f64)]) -> Result<(f64, f64), EntropyError> {
    validate_top_logprobs(top_logprobs).map_err(EntropyError::Value)?;
    let mut probs: Vec<f64> = top_logprobs.iter().map(|(_, lp)| lp.min(0.0).exp()).collect();
    let mass: f64 = probs.iter().sum();
    if mass > 1.0 {
        probs.iter_mut().for_each(|p| *p /= mass);
    }
    let tail = (1.0 - mass).max(0.0);
    let h = plogp_sum(probs.into_iter().chain(std::iter::once(tail)));
    Ok((h, tail))
}

/// Entropy of one token record and whether it is exact.
pub fn token_bits(token: &TokenRecord, index: usize) -> Result<(f64, bool), EntropyError> {
    if let Some(bits) = token.entropy_bits {
        return Ok((bits, true));
    }
    match &token.top_logprobs {
        Some(top) => {
            let (h, tail) = token_entropy_from_topk(top)?;
            Ok((h, tail <= TAIL_TOLERANCE))
        }
        None => Err(EntropyError::MissingEntropySource(index)),
    }
}

/// Sum of token entropies over `span`.
pub fn step_entropy(per_token_bits: &[f64], span: Range<usize>) -> Result<f64, EntropyError> {
    if span.start > span.end || span.end > per_token_bits.len() {
        return Err(EntropyError::Range {
            start: span.start,
            end: span.end,
            len: per_token_bits.len(),
        });
    }
    Ok(per_token_bits[span].iter().sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub per_token_bits: Vec<f64>,
    pub per_step_bits: Vec<f64>,
    /// Token count of each step, so callers can derive per-token means.
    pub step_lengths: Vec<usize>,
    pub mode: EntropyMode,
}

/// Computes per-token and per-step entropies for a segmented trace.
pub fn analyze(segmented: &SegmentedTrace) -> Result<EntropyReport, EntropyError> {
    let mut per_token_bits = Vec::with_capacity(segmented.source.tokens.len());
    let mut exact = true;
    for (i, token) in segmented.source.tokens.iter().enumerate() {
        let (bits, is_exact) = token_bits(token, i)?;
        exact &= is_exact;
        per_token_bits.push(bits);
    }
    let per_step_bits = segmented
        .steps
        .iter()
        .map(|s| step_entropy(&per_token_bits, s.token_span.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EntropyReport {
        per_step_bits,
        step_lengths: segmented.steps.iter().map(|s| s.token_span.len()).collect(),
        per_token_bits,
        mode: if exact { EntropyMode::Exact } else { EntropyMode::TopKLowerBound },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn distribution_examples() {
        assert_eq!(token_entropy_from_distribution(&[0.25; 4]).unwrap(), 2.0);
        assert_eq!(token_entropy_from_distribution(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        // 0.5*1 + 0.25*2 + 0.25*2
        assert!((token_entropy_from_distribution(&[0.5, 0.25, 0.25]).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn distribution_errors() {
        assert!(token_entropy_from_distribution(&[]).is_err());
        assert!(token_entropy_from_distribution(&[0.5, -0.1, 0.6]).is_err());
        assert!(token_entropy_from_distribution(&[0.0, 0.0]).is_err());
        assert!(token_entropy_from_distribution(&[0.5, 0.4]).is_err());
        // within tolerance: renormalized
        let h = token_entropy_from_distribution(&[0.5 + 4e-7, 0.5]).unwrap();
        assert!((h - 1.0).abs() < 1e-9);
    }

    #[test]
    fn topk_examples() {
        let one = token_entropy_from_topk(&[("a".into(), 0.0)]).unwrap();
        assert_eq!(one, (0.0, 0.0));
        let half = 0.5f64.ln();
        let (h, tail) = token_entropy_from_topk(&[("a".into(), half), ("b".into(), half)]).unwrap();
        assert!((h - 1.0).abs() < 1e-12 && tail < 1e-12);
        let (h, tail) =
            token_entropy_from_topk(&[("a".into(), half), ("b".into(), 0.25f64.ln())]).unwrap();
        assert!((tail - 0.25).abs() < 1e-12);
        assert!((h - 1.5).abs() < 1e-12);
    }

    #[test]
    fn topk_errors() {
        assert!(token_entropy_from_topk(&[("a".into(), -2.0), ("b".into(), -0.1)]).is_err());
        assert!(token_entropy_from_topk(&[("a".into(), 0.5)]).is_err());
        assert!(token_entropy_from_topk(&[]).is_err());
    }

    #[test]
    fn step_entropy_sums() {
        let bits = [0.1, 0.4, 0.5];
        assert!((step_entropy(&bits, 0..3).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(step_entropy(&bits, 1..1).unwrap(), 0.0);
        assert!(matches!(step_entropy(&bits, 2..4), Err(EntropyError::Range { .. })));
    }

    #[test]
    fn whole_trace_span_matches_independent_accumulation() {
        let bits: Vec<f64> = (0..257).map(|i| ((i * 37) % 11) as f64 * 0.0625).collect();
        let mut acc = 0.0;
        for b in &bits {
            acc += b;
        }
        assert_eq!(step_entropy(&bits, 0..bits.len()).unwrap(), acc);
    }

    proptest! {
        #[test]
        fn entropy_bounded_by_log_support(weights in prop::collection::vec(0.0f64..10.0, 1..40)) {
            let total: f64 = weights.iter().sum();
            prop_assume!(total > 1e-9);
            let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
            let h = token_entropy_from_distribution(&probs).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (probs.len() as f64).log2() + 1e-12);
        }

        #[test]
        fn truncation_never_exceeds_full_entropy(
            weights in prop::collection::vec(0.01f64..10.0, 2..30),
            k in 1usize..30,
        ) {
            let total: f64 = weights.iter().sum();
            let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
            probs.sort_by(|a, b| b.total_cmp(a));
            let full = token_entropy_from_distribution(&probs).unwrap();
            let top: Vec<(String, f64)> = probs
                .iter()
                .take(k)
                .enumerate()
                .map(|(i, p)| (i.to_string(), p.ln()))
                .collect();
            let (lower, _) = token_entropy_from_topk(&top).unwrap();
            prop_assert!(lower <= full + 1e-9, "{lower} > {full}");
        }
    }
}
