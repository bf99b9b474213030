//! Token-level masking baseline and its step-level counterpart at a matched
//! token-removal ratio.

use std::collections::BTreeSet;

use crate::backend::client::CompletionBackend;
use crate::entropy;
use crate::prune::{self, CompressedCot, PruneConfig, PrunePlan, Strategy};
use crate::segment::SegmentedTrace;
use crate::trace::TraceRecord;

use super::sweep::{run_series, SeriesKind, SweepError, SweepReport, SweepRun, SweepSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedThink {
    pub think: String,
    pub removed_tokens: Vec<usize>,
    pub kept_tokens: usize,
}

/// Number of tokens removed out of `total` at `ratio`.
pub fn removal_count(ratio: f64, total: usize) -> usize {
    ((ratio * total as f64 + prune::KAPPA_EPSILON).floor() as usize).min(total)
}

/// Deletes the `floor(ratio * T)` lowest-entropy step tokens, ties to the
/// earlier token. Delimiters and tags are never removed.
pub fn mask_tokens(seg: &SegmentedTrace, ratio: f64) -> MaskedThink {
    let mut candidates: Vec<(usize, f64)> = seg
        .steps
        .iter()
        .flat_map(|s| s.token_span.clone())
        .map(|t| (t, entropy::token_bits(&seg.source.tokens[t], t).map_or(0.0, |(b, _)| b)))
        .collect();
    let total = candidates.len();
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let m = removal_count(ratio, total);
    let mut removed: Vec<usize> = candidates[..m].iter().map(|(t, _)| *t).collect();
    removed.sort_unstable();

    let offsets = seg.source.token_offsets();
    let raw = &seg.source.raw_completion;
    let mut think = String::with_capacity(seg.think_span.len());
    let mut cursor = seg.think_span.start;
    for &t in &removed {
        think.push_str(&raw[cursor..offsets[t]]);
        cursor = offsets[t + 1];
    }
    think.push_str(&raw[cursor..seg.think_span.end]);
    MaskedThink { think, removed_tokens: removed, kept_tokens: total - m }
}

/// Prunes lowest-entropy steps, one at a time, until the token reduction
/// reaches `ratio` (or every step is pruned).
pub fn matched_step_prune(seg: &SegmentedTrace, ratio: f64, skip_token: &str) -> CompressedCot {
    let entropies = seg.step_entropies();
    let n = entropies.len();
    let order = prune::selection_order(&entropies, Strategy::LowEntropy, 0);
    let mut last = None;
    for m in 0..=n {
        let pruned: BTreeSet<usize> = order[..m].iter().copied().collect();
        let plan = PrunePlan {
            kept_indices: (0..n).filter(|i| !pruned.contains(i)).collect(),
            pruned_indices: pruned,
            k_target: m,
            ranking: order.iter().map(|&i| (i, entropies[i])).collect(),
        };
        let config = PruneConfig {
            kappa: if n == 0 { 0.0 } else { m as f64 / n as f64 },
            strategy: Strategy::LowEntropy,
            seed: 0,
            skip_token: skip_token.to_string(),
            collapse_skips: false,
        };
        let cot = prune::compress(seg, &plan, &config).expect("plan partitions the steps");
        if prune::token_reduction(seg, &cot) >= ratio - 1e-12 {
            return cot;
        }
        last = Some(cot);
    }
    last.expect("at least one candidate")
}

/// Token masking against matched step pruning, one row pair per ratio.
pub fn token_prune_baseline<E>(
    traces: impl IntoIterator<Item = Result<TraceRecord, E>>,
    spec: &SweepSpec,
    backend: &dyn CompletionBackend,
    run: &SweepRun<'_>,
) -> Result<SweepReport, SweepError>
where
    SweepError: From<E>,
{
    run_series(traces, &[SeriesKind::TokenLowEntropy, SeriesKind::StepMatched], spec, backend, run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::segment;
    use crate::trace::TokenRecord;

    fn seg(tokens: &[(&str, f64)]) -> SegmentedTrace {
        let toks = tokens.iter().map(|(t, h)| TokenRecord::with_entropy(*t, *h)).collect();
        segment(&TraceRecord::from_tokens("t", "q", toks)).unwrap()
    }

    fn sample() -> SegmentedTrace {
        seg(&[
            ("<think>", 0.0),
            ("a", 0.5),
            ("b", 0.1),
            ("\n\n", 0.0),
            ("c", 0.1),
            ("d", 0.9),
            ("</think>", 0.0),
        ])
    }

    #[test]
    fn ratio_zero_is_identity() {
        let s = sample();
        let m = mask_tokens(&s, 0.0);
        assert_eq!(m.think, s.think_text());
        assert_eq!(m.kept_tokens, 4);
    }

    #[test]
    fn removes_lowest_tokens_with_index_ties() {
        let s = sample();
        let m = mask_tokens(&s, 0.25);
        assert_eq!(m.removed_tokens, vec![2]);
        assert_eq!(m.think, "a\n\ncd");
        let m = mask_tokens(&s, 0.5);
        assert_eq!(m.removed_tokens, vec![2, 4]);
        assert_eq!(m.think, "a\n\nd");
        assert_eq!(mask_tokens(&s, 1.0).think, "\n\n");
    }

    #[test]
    fn matched_pruning_reaches_target() {
        let s = seg(&[
            ("<think>", 0.0),
            ("a", 0.5),
            ("b", 0.5),
            ("c", 0.5),
            ("\n\n", 0.0),
            ("d", 0.1),
            ("e", 0.1),
            ("f", 0.1),
            ("</think>", 0.0),
        ]);
        let cot = matched_step_prune(&s, 0.3, "[SKIP]");
        assert_eq!(cot.pruned_indices(), vec![1]);
        assert!((prune::token_reduction(&s, &cot) - 2.0 / 6.0).abs() < 1e-12);
        assert!(matched_step_prune(&s, 0.0, "[SKIP]").pruned_indices().is_empty());
    }
}
