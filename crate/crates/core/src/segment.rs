//! Splits the thinking region of a trace into `"\n\n"`-delimited steps and maps
//! each step back to the tokens that produced it.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::entropy::{self, EntropyError};
use crate::trace::TraceRecord;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const STEP_DELIMITER: &str = "\n\n";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SegmentError {
    #[error("completion has no <think>...</think> pair")]
    MissingThinkTags,
    #[error("completion has more than one think block")]
    MultipleThinkBlocks,
    #[error("token {token} straddles a step boundary ({detail})")]
    TokenBoundary { token: usize, detail: String },
    #[error(transparent)]
    Entropy(#[from] EntropyError),
}

/// One reasoning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    /// Half-open range into the source trace's tokens.
    pub token_span: Range<usize>,
    /// Byte range of the step text inside `raw_completion`.
    pub char_span: Range<usize>,
    pub text: String,
    pub entropy_bits: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedTrace {
    pub source: TraceRecord,
    /// Byte range strictly between the think tags.
    pub think_span: Range<usize>,
    pub steps: Vec<Step>,
    pub tail: String,
}

impl SegmentedTrace {
    pub fn think_text(&self) -> &str {
        &self.source.raw_completion[self.think_span.clone()]
    }

    /// Tokens that belong to some step.
    pub fn think_token_count(&self) -> usize {
        self.steps.iter().map(|s| s.token_span.len()).sum()
    }

    pub fn step_entropies(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.entropy_bits).collect()
    }
}

/// Byte ranges of the non-empty steps of `text`, relative to `text`.
///
/// Newlines at either end of a segment belong to the delimiter; segments
/// that are empty or whitespace-only after that are dropped.
pub fn split_steps(text: &str) -> Vec<Range<usize>> {
    let mut ranges = Vec::new();
    let mut start = 0;
    let mut push = |seg_start: usize, seg_end: usize| {
        let seg = &text[seg_start..seg_end];
        let lead = seg.len() - seg.trim_start_matches('\n').len();
        let trail = seg.len() - seg.trim_end_matches('\n').len();
        if seg.trim().is_empty() {
            return;
        }
        ranges.push(seg_start + lead..seg_end - trail);
    };
    for (at, _) in text.match_indices(STEP_DELIMITER) {
        push(start, at);
        start = at + STEP_DELIMITER.len();
    }
    push(start, text.len());
    ranges
}

/// Maps each byte range to the tokens covering it.
///
/// A token belongs to the range containing any of its bytes; tokens touching
/// no range (pure delimiter residue) belong to none. A token touching two
/// ranges is an error.
pub fn step_token_spans(
    record: &TraceRecord,
    char_ranges: &[Range<usize>],
) -> Result<Vec<Range<usize>>, SegmentError> {
    let offsets = record.token_offsets();
    let mut spans: Vec<Option<Range<usize>>> = vec![None; char_ranges.len()];
    let mut r = 0;
    for token in 0..record.tokens.len() {
        let (a, b) = (offsets[token], offsets[token + 1]);
        if a == b {
            continue;
        }
        while r < char_ranges.len() && char_ranges[r].end <= a {
            r += 1;
        }
        let mut hit = None;
        let mut k = r;
        while k < char_ranges.len() && char_ranges[k].start < b {
            if char_ranges[k].end > a && !char_ranges[k].is_empty() {
                if let Some(prev) = hit {
                    return Err(SegmentError::TokenBoundary {
                        token,
                        detail: format!("token {:?} covers steps {prev} and {k}", record.tokens[token].text),
                    });
                }
                hit = Some(k);
            }
            k += 1;
        }
        if let Some(k) = hit {
            let span = spans[k].get_or_insert(token..token);
            span.end = token + 1;
        }
    }
    Ok(spans.into_iter().map(|s| s.unwrap_or(0..0)).collect())
}

fn find_unique(haystack: &str, needle: &str) -> Result<Option<usize>, SegmentError> {
    let mut hits = haystack.match_indices(needle).map(|(i, _)| i);
    let first = hits.next();
    if hits.next().is_some() {
        return Err(SegmentError::MultipleThinkBlocks);
    }
    Ok(first)
}

/// Segments a trace's thinking region into steps with their entropies.
pub fn segment(record: &TraceRecord) -> Result<SegmentedTrace, SegmentError> {
    let raw = record.raw_completion.as_str();
    let open = find_unique(raw, THINK_OPEN)?;
    let close = find_unique(raw, THINK_CLOSE)?;
    let (open, close) = match (open, close) {
        (Some(o), Some(c)) if o + THINK_OPEN.len() <= c => (o, c),
        _ => return Err(SegmentError::MissingThinkTags),
    };
    let think_span = open + THINK_OPEN.len()..close;
    let char_ranges: Vec<Range<usize>> = split_steps(&raw[think_span.clone()])
        .into_iter()
        .map(|r| r.start + think_span.start..r.end + think_span.start)
        .collect();
    let token_spans = step_token_spans(record, &char_ranges)?;

    let offsets = record.token_offsets();
    let mut steps = Vec::with_capacity(char_ranges.len());
    for (index, (chars, span)) in char_ranges.into_iter().zip(token_spans).enumerate() {
        let (first, last) = (span.start, span.end - 1);
        if offsets[first] < think_span.start || offsets[last + 1] > think_span.end {
            let token = if offsets[first] < think_span.start { first } else { last };
            return Err(SegmentError::TokenBoundary {
                token,
                detail: "token mixes a think tag with step content".into(),
            });
        }
        let mut entropy_bits = 0.0;
        for t in span.clone() {
            entropy_bits += entropy::token_bits(&record.tokens[t], t)?.0;
        }
        steps.push(Step {
            index,
            token_span: span,
            text: raw[chars.clone()].to_string(),
            char_span: chars,
            entropy_bits,
        });
    }
    Ok(SegmentedTrace {
        tail: raw[close + THINK_CLOSE.len()..].to_string(),
        source: record.clone(),
        think_span,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TokenRecord;
    use proptest::prelude::*;

    fn trace(tokens: &[&str]) -> TraceRecord {
        TraceRecord::from_tokens(
            "t",
            "q",
            tokens.iter().map(|t| TokenRecord::with_entropy(*t, 0.25)).collect(),
        )
    }

    fn texts(s: &SegmentedTrace) -> Vec<&str> {
        s.steps.iter().map(|s| s.text.as_str()).collect()
    }

    #[test]
    fn basic_split() {
        let s = segment(&trace(&["<think>", "A", "\n\n", "B", "</think>", "42"])).unwrap();
        assert_eq!(texts(&s), ["A", "B"]);
        assert_eq!(s.tail, "42");
        assert_eq!(s.steps[0].token_span, 1..2);
        assert_eq!(s.steps[1].token_span, 3..4);
        assert_eq!(s.steps[1].entropy_bits, 0.25);
    }

    #[test]
    fn empty_middle_segment_dropped() {
        let s = segment(&trace(&["<think>", "A", "\n\n\n\n", "B", "</think>", "x"])).unwrap();
        assert_eq!(texts(&s), ["A", "B"]);
        let odd = segment(&trace(&["<think>", "A\n\n\nB", "</think>"]));
        assert!(matches!(odd, Err(SegmentError::TokenBoundary { .. })));
        let s = segment(&trace(&["<think>", "A", "\n\n\n", "B", "</think>"])).unwrap();
        assert_eq!(texts(&s), ["A", "B"]);
    }

    #[test]
    fn tag_errors() {
        assert_eq!(segment(&trace(&["<think>", "A"])).unwrap_err(), SegmentError::MissingThinkTags);
        assert_eq!(segment(&trace(&["A", "</think>"])).unwrap_err(), SegmentError::MissingThinkTags);
        assert_eq!(segment(&trace(&["</think>", "<think>"])).unwrap_err(), SegmentError::MissingThinkTags);
        assert_eq!(
            segment(&trace(&["<think>", "A", "</think>", "<think>", "</think>"])).unwrap_err(),
            SegmentError::MultipleThinkBlocks
        );
    }

    #[test]
    fn empty_think_region_has_no_steps() {
        let s = segment(&trace(&["<think>", "</think>", "7"])).unwrap();
        assert!(s.steps.is_empty());
        let s = segment(&trace(&["<think>", "\n\n", " ", "\n", "</think>"])).unwrap();
        assert!(s.steps.is_empty());
    }

    #[test]
    fn delimiter_split_across_tokens() {
        // Brute force over the 2-token instance: "A\n" must own its A, "\nB" its B.
        let r = trace(&["A\n", "\nB"]);
        let spans = step_token_spans(&r, &[0..1, 3..4]).unwrap();
        assert_eq!(spans, vec![0..1, 1..2]);
    }

    #[test]
    fn delimiter_only_tokens_belong_to_no_step() {
        let r = trace(&["A", "\n\n", "B"]);
        assert_eq!(step_token_spans(&r, &[0..1, 3..4]).unwrap(), vec![0..1, 2..3]);
    }

    #[test]
    fn single_newline_inside_token_is_not_a_boundary() {
        let s = segment(&trace(&["<think>", "A\nB", "\n\n", "C", "</think>"])).unwrap();
        assert_eq!(texts(&s), ["A\nB", "C"]);
        assert_eq!(s.steps[0].token_span, 1..2);
    }

    #[test]
    fn tag_fused_with_content_rejected() {
        let err = segment(&trace(&["<think>A", "\n\n", "B", "</think>"])).unwrap_err();
        assert!(matches!(err, SegmentError::TokenBoundary { token: 0, .. }));
    }

    #[test]
    fn punctuation_steps_are_kept() {
        let s = segment(&trace(&["<think>", "\n", ".", "\n\n", "?", "\n", "</think>"])).unwrap();
        assert_eq!(texts(&s), [".", "?"]);
    }

    proptest! {
        #[test]
        fn reassembly_and_partition(parts in prop::collection::vec("[a-c ]{0,3}[a-c][a-c ]{0,3}", 1..8)) {
            let think = parts.join("\n\n");
            let mut tokens = vec!["<think>".to_string()];
            // one token per char, delimiters as their own tokens
            for c in think.chars() {
                tokens.push(c.to_string());
            }
            tokens.push("</think>".into());
            let refs: Vec<&str> = tokens.iter().map(String::as_str).collect();
            let s = segment(&trace(&refs)).unwrap();
            let joined = texts(&s).join("\n\n");
            prop_assert_eq!(joined, think.clone());
            let mut prev_end = 0;
            for step in &s.steps {
                prop_assert!(!step.token_span.is_empty());
                prop_assert!(step.token_span.start >= prev_end);
                prev_end = step.token_span.end;
            }
            // every non-newline think token is covered
            let covered: usize = s.steps.iter().map(|s| s.token_span.len()).sum();
            let expected = think.chars().filter(|c| *c != '\n').count();
            prop_assert_eq!(covered, expected);
        }
    }
}
