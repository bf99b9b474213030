//! Step selection, `[SKIP]` substitution and compressed-inference prompts.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::rng;
use crate::segment::{SegmentedTrace, STEP_DELIMITER};

pub const DEFAULT_SKIP_TOKEN: &str = "[SKIP]";

/// Absorbs float error in `kappa * n` so that e.g. 0.7 * 10 selects 7.
pub const KAPPA_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PruneError {
    #[error("kappa must be in [0, 1], got {0}")]
    InvalidKappa(f64),
    #[error("plan does not match trace: {0}")]
    PlanMismatch(String),
    #[error("unknown strategy {0:?} (expected low-entropy, high-entropy or random)")]
    UnknownStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    LowEntropy,
    HighEntropy,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::LowEntropy, Strategy::HighEntropy, Strategy::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::LowEntropy => "low-entropy",
            Strategy::HighEntropy => "high-entropy",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low-entropy" | "low" | "lowentropy" => Ok(Strategy::LowEntropy),
            "high-entropy" | "high" | "highentropy" => Ok(Strategy::HighEntropy),
            "random" => Ok(Strategy::Random),
            other => Err(PruneError::UnknownStrategy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub kappa: f64,
    pub strategy: Strategy,
    pub seed: u64,
    pub skip_token: String,
    /// Render runs of consecutive skips as one marker. Off by default.
    pub collapse_skips: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            kappa: 0.8,
            strategy: Strategy::LowEntropy,
            seed: 0,
            skip_token: DEFAULT_SKIP_TOKEN.to_string(),
            collapse_skips: false,
        }
    }
}

impl PruneConfig {
    pub fn new(kappa: f64, strategy: Strategy) -> Result<Self, PruneError> {
        let config = Self { kappa, strategy, ..Self::default() };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PruneError> {
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(PruneError::InvalidKappa(self.kappa));
        }
        Ok(())
    }

    /// Same config with the random seed specialised to one trace, so that
    /// random selections do not depend on processing order.
    pub fn for_trace(&self, trace_id: &str) -> Self {
        Self { seed: rng::derive_seed(self.seed, trace_id), ..self.clone() }
    }
}

/// Number of steps pruned out of `n` at ratio `kappa`: `floor(kappa * n)`.
pub fn k_target(kappa: f64, n: usize) -> usize {
    ((kappa * n as f64 + KAPPA_EPSILON).floor() as usize).min(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub pruned_indices: BTreeSet<usize>,
    pub kept_indices: BTreeSet<usize>,
    pub k_target: usize,
    /// Every step in selection order; the first `k_target` are pruned.
    pub ranking: Vec<(usize, f64)>,
}

/// Full selection order of the steps under a strategy.
pub fn selection_order(entropies: &[f64], strategy: Strategy, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    match strategy {
        Strategy::LowEntropy => order.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]).then(a.cmp(&b))),
        Strategy::HighEntropy => order.sort_by(|&a, &b| entropies[b].total_cmp(&entropies[a]).then(a.cmp(&b))),
        Strategy::Random => rng::shuffle(&mut rng::pcg(seed), &mut order),
    }
    order
}

pub fn select(entropies: &[f64], config: &PruneConfig) -> PrunePlan {
    let n = entropies.len();
    let k = k_target(config.kappa, n);
    let order = selection_order(entropies, config.strategy, config.seed);
    let pruned_indices: BTreeSet<usize> = order[..k].iter().copied().collect();
    PrunePlan {
        kept_indices: (0..n).filter(|i| !pruned_indices.contains(i)).collect(),
        pruned_indices,
        k_target: k,
        ranking: order.into_iter().map(|i| (i, entropies[i])).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotElement {
    Kept { index: usize, text: String },
    Skip { index: usize },
}

impl CotElement {
    pub fn index(&self) -> usize {
        match self {
            CotElement::Kept { index, .. } | CotElement::Skip { index } => *index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedCot {
    pub source_id: String,
    pub kappa: f64,
    pub strategy: Strategy,
    pub elements: Vec<CotElement>,
    pub compressed_think: String,
    pub inference_prompt: String,
    /// Skip markers actually rendered (fewer than skip elements when collapsing).
    pub rendered_skips: usize,
}

impl CompressedCot {
    pub fn pruned_indices(&self) -> Vec<usize> {
        self.elements
            .iter()
            .filter_map(|e| match e {
                CotElement::Skip { index } => Some(*index),
                CotElement::Kept { .. } => None,
            })
            .collect()
    }
}

/// The compressed-inference prompt: problem, think block, closing tag.
pub fn build_prompt(problem: &str, compressed_think: &str) -> String {
    format!("{problem}\n<think>\n{compressed_think}\n</think>\n")
}

pub fn compress(
    segmented: &SegmentedTrace,
    plan: &PrunePlan,
    config: &PruneConfig,
) -> Result<CompressedCot, PruneError> {
    let n = segmented.steps.len();
    if let Some(bad) = plan.pruned_indices.iter().chain(&plan.kept_indices).find(|&&i| i >= n) {
        return Err(PruneError::PlanMismatch(format!("step index {bad} out of range for {n} steps")));
    }
    if plan.pruned_indices.len() + plan.kept_indices.len() != n
        || plan.pruned_indices.intersection(&plan.kept_indices).next().is_some()
    {
        return Err(PruneError::PlanMismatch(format!(
            "pruned and kept sets do not partition {n} steps"
        )));
    }
    let elements: Vec<CotElement> = segmented
        .steps
        .iter()
        .map(|s| {
            if plan.pruned_indices.contains(&s.index) {
                CotElement::Skip { index: s.index }
            } else {
                CotElement::Kept { index: s.index, text: s.text.clone() }
            }
        })
        .collect();

    let mut parts: Vec<&str> = Vec::with_capacity(n);
    let mut rendered_skips = 0;
    let mut prev_skip = false;
    for e in &elements {
        match e {
            CotElement::Kept { text, .. } => {
                parts.push(text);
                prev_skip = false;
            }
            CotElement::Skip { .. } => {
                if !(config.collapse_skips && prev_skip) {
                    parts.push(&config.skip_token);
                    rendered_skips += 1;
                }
                prev_skip = true;
            }
        }
    }
    let compressed_think = if plan.pruned_indices.is_empty() {
        segmented.think_text().to_string()
    } else {
        parts.join(STEP_DELIMITER)
    };
    let inference_prompt = build_prompt(&segmented.source.problem, &compressed_think);
    Ok(CompressedCot {
        source_id: segmented.source.id.clone(),
        kappa: config.kappa,
        strategy: config.strategy,
        elements,
        compressed_think,
        inference_prompt,
        rendered_skips,
    })
}

fn kept_step_tokens(original: &SegmentedTrace, compressed: &CompressedCot) -> usize {
    compressed
        .elements
        .iter()
        .filter_map(|e| match e {
            CotElement::Kept { index, .. } => Some(original.steps[*index].token_span.len()),
            CotElement::Skip { .. } => None,
        })
        .sum()
}

/// Think tokens after compression, counting one token per rendered skip.
pub fn compressed_think_tokens(original: &SegmentedTrace, compressed: &CompressedCot) -> usize {
    kept_step_tokens(original, compressed) + compressed.rendered_skips
}

/// Fraction of think tokens removed by compression.
pub fn token_reduction(original: &SegmentedTrace, compressed: &CompressedCot) -> f64 {
    let total = original.think_token_count();
    if total == 0 {
        return 0.0;
    }
    let kept = compressed_think_tokens(original, compressed);
    (1.0 - kept as f64 / total as f64).clamp(0.0, 1.0)
}

/// Whole-completion token count after compression: every token outside
/// pruned steps, plus one per rendered skip.
pub fn compressed_total_tokens(original: &SegmentedTrace, compressed: &CompressedCot) -> usize {
    let pruned: usize = compressed
        .pruned_indices()
        .iter()
        .map(|&i| original.steps[i].token_span.len())
        .sum();
    original.source.tokens.len() - pruned + compressed.rendered_skips
}

/// One line of a compressed dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedRecord {
    pub id: String,
    pub problem: String,
    pub compressed_think: String,
    pub inference_prompt: String,
    pub kappa: f64,
    pub strategy: Strategy,
    pub pruned_indices: Vec<usize>,
    pub token_reduction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

impl CompressedRecord {
    pub fn new(original: &SegmentedTrace, compressed: &CompressedCot) -> Self {
        Self {
            id: original.source.id.clone(),
            problem: original.source.problem.clone(),
            compressed_think: compressed.compressed_think.clone(),
            inference_prompt: compressed.inference_prompt.clone(),
            kappa: compressed.kappa,
            strategy: compressed.strategy,
            pruned_indices: compressed.pruned_indices(),
            token_reduction: token_reduction(original, compressed),
            ground_truth: original.source.ground_truth.clone(),
        }
    }
}

/// Segments-in, record-out convenience: select, compress and summarise one trace.
pub fn prune_trace(
    segmented: &SegmentedTrace,
    config: &PruneConfig,
) -> Result<(PrunePlan, CompressedCot), PruneError> {
    let per_trace = config.for_trace(&segmented.source.id);
    let plan = select(&segmented.step_entropies(), &per_trace);
    let compressed = compress(segmented, &plan, &per_trace)?;
    Ok((plan, compressed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::segment;
    use crate::trace::{TokenRecord, TraceRecord};
    use proptest::prelude::*;
    use super::Strategy;

    fn low(kappa: f64) -> PruneConfig {
        PruneConfig::new(kappa, Strategy::LowEntropy).unwrap()
    }

    /// Independent oracle: sort (entropy, index) pairs and take a prefix.
    fn brute_force(entropies: &[f64], k: usize, largest: bool) -> BTreeSet<usize> {
        let mut pairs: Vec<(f64, usize)> = entropies.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| {
            let by_value = if largest { b.0.partial_cmp(&a.0) } else { a.0.partial_cmp(&b.0) };
            by_value.unwrap().then(a.1.cmp(&b.1))
        });
        pairs[..k].iter().map(|p| p.1).collect()
    }

    #[test]
    fn select_examples() {
        let plan = select(&[3.0, 0.5, 2.0, 0.1, 1.0], &low(0.8));
        assert_eq!(plan.k_target, 4);
        assert_eq!(plan.pruned_indices, BTreeSet::from([1, 2, 3, 4]));
        assert_eq!(plan.kept_indices, BTreeSet::from([0]));
        assert_eq!(plan.ranking[..4].iter().map(|r| r.0).collect::<Vec<_>>(), [3, 1, 4, 2]);

        let plan = select(&[3.0, 0.5, 2.0], &low(0.0));
        assert!(plan.pruned_indices.is_empty());
        assert_eq!(plan.kept_indices.len(), 3);

        let plan = select(&[1.0, 1.0, 2.0], &low(0.34));
        assert_eq!(plan.pruned_indices, BTreeSet::from([0]));
    }

    #[test]
    fn kappa_validation_and_rounding() {
        assert!(PruneConfig::new(1.01, Strategy::Random).is_err());
        assert!(PruneConfig::new(-0.0001, Strategy::Random).is_err());
        assert_eq!(k_target(0.7, 10), 7);
        assert_eq!(k_target(0.1 + 0.2, 10), 3);
        assert_eq!(k_target(0.8, 5), 4);
        assert_eq!(k_target(1.0, 0), 0);
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("low-entropy".parse::<Strategy>().unwrap(), Strategy::LowEntropy);
        assert_eq!("high".parse::<Strategy>().unwrap(), Strategy::HighEntropy);
        assert!("middle".parse::<Strategy>().is_err());
    }

    fn five_steps() -> SegmentedTrace {
        let mut tokens = vec![TokenRecord::with_entropy("<think>", 0.0)];
        for i in 1..=5 {
            if i > 1 {
                tokens.push(TokenRecord::with_entropy("\n\n", 0.0));
            }
            for _ in 0..10 {
                tokens.push(TokenRecord::with_entropy(format!("S{i}"), i as f64 * 0.01));
            }
        }
        tokens.push(TokenRecord::with_entropy("</think>", 0.0));
        tokens.push(TokenRecord::with_entropy("42", 0.0));
        segment(&TraceRecord::from_tokens("t", "Q", tokens)).unwrap()
    }

    fn single_token_steps() -> SegmentedTrace {
        let text = ["<think>", "S1", "\n\n", "S2", "\n\n", "S3", "\n\n", "S4", "\n\n", "S5", "</think>"];
        let tokens = text.iter().map(|t| TokenRecord::with_entropy(*t, 0.5)).collect();
        segment(&TraceRecord::from_tokens("t", "Q", tokens)).unwrap()
    }

    fn plan_for(n: usize, pruned: &[usize]) -> PrunePlan {
        let pruned_indices: BTreeSet<usize> = pruned.iter().copied().collect();
        PrunePlan {
            kept_indices: (0..n).filter(|i| !pruned_indices.contains(i)).collect(),
            k_target: pruned.len(),
            pruned_indices,
            ranking: vec![],
        }
    }

    #[test]
    fn compress_renders_skips_in_place() {
        let seg = single_token_steps();
        let c = compress(&seg, &plan_for(5, &[1, 3]), &low(0.4)).unwrap();
        assert_eq!(c.compressed_think, "S1\n\n[SKIP]\n\nS3\n\n[SKIP]\n\nS5");
        assert_eq!(c.inference_prompt, "Q\n<think>\nS1\n\n[SKIP]\n\nS3\n\n[SKIP]\n\nS5\n</think>\n");

        let all = compress(&seg, &plan_for(5, &[0, 1, 2, 3, 4]), &low(1.0)).unwrap();
        assert_eq!(all.compressed_think, ["[SKIP]"; 5].join("\n\n"));

        let none = compress(&seg, &plan_for(5, &[]), &low(0.0)).unwrap();
        assert_eq!(none.compressed_think, seg.think_text());
    }

    #[test]
    fn collapse_option_merges_runs() {
        let seg = single_token_steps();
        let config = PruneConfig { collapse_skips: true, ..low(0.6) };
        let c = compress(&seg, &plan_for(5, &[1, 2, 4]), &config).unwrap();
        assert_eq!(c.compressed_think, "S1\n\n[SKIP]\n\nS4\n\n[SKIP]");
        assert_eq!(c.rendered_skips, 2);
        assert_eq!(c.pruned_indices(), vec![1, 2, 4]);
    }

    #[test]
    fn plan_mismatch() {
        let seg = single_token_steps();
        assert!(matches!(compress(&seg, &plan_for(6, &[5]), &low(0.2)), Err(PruneError::PlanMismatch(_))));
        let mut bad = plan_for(5, &[1]);
        bad.kept_indices.remove(&0);
        assert!(matches!(compress(&seg, &bad, &low(0.2)), Err(PruneError::PlanMismatch(_))));
    }

    #[test]
    fn build_prompt_examples() {
        assert_eq!(build_prompt("Q", "A\n\n[SKIP]"), "Q\n<think>\nA\n\n[SKIP]\n</think>\n");
        let empty = build_prompt("Q", "");
        assert_eq!(empty, "Q\n<think>\n\n</think>\n");
        assert_eq!(empty.matches("<think>").count(), 1);
        assert_eq!(empty.matches("</think>").count(), 1);
    }

    #[test]
    fn token_reduction_examples() {
        let seg = five_steps();
        let none = compress(&seg, &plan_for(5, &[]), &low(0.0)).unwrap();
        assert_eq!(token_reduction(&seg, &none), 0.0);
        let four = compress(&seg, &plan_for(5, &[0, 1, 2, 3]), &low(0.8)).unwrap();
        // 10 kept + 4 skips out of 50
        assert!((token_reduction(&seg, &four) - 0.72).abs() < 1e-12);
        let all = compress(&seg, &plan_for(5, &[0, 1, 2, 3, 4]), &low(1.0)).unwrap();
        assert!((token_reduction(&seg, &all) - (1.0 - 5.0 / 50.0)).abs() < 1e-12);
        // 2 tags + 4 delimiters + 1 answer + 10 kept + 4 skips
        assert_eq!(compressed_total_tokens(&seg, &four), 21);
    }

    #[test]
    fn random_is_seed_deterministic() {
        let e: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let config = PruneConfig { seed: 11, ..PruneConfig::new(0.5, Strategy::Random).unwrap() };
        let a = select(&e, &config);
        assert_eq!(a, select(&e, &config));
        assert_eq!(a.pruned_indices.len(), 10);
        let other = select(&e, &PruneConfig { seed: 12, ..config.clone() });
        assert_ne!(a.pruned_indices, other.pruned_indices);
    }

    proptest! {
        #[test]
        fn selection_matches_brute_force(
            entropies in prop::collection::vec(prop::sample::select(vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.25]), 0..30),
            kappa in 0.0f64..=1.0,
        ) {
            let k = k_target(kappa, entropies.len());
            let lowp = select(&entropies, &low(kappa));
            prop_assert_eq!(&lowp.pruned_indices, &brute_force(&entropies, k, false));
            let highp = select(&entropies, &PruneConfig::new(kappa, Strategy::HighEntropy).unwrap());
            prop_assert_eq!(&highp.pruned_indices, &brute_force(&entropies, k, true));
        }

        #[test]
        fn nested_in_kappa(
            entropies in prop::collection::vec(0.0f64..4.0, 0..30),
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for strategy in Strategy::ALL {
                let c1 = PruneConfig { seed, ..PruneConfig::new(lo, strategy).unwrap() };
                let c2 = PruneConfig { kappa: hi, ..c1.clone() };
                let p1 = select(&entropies, &c1);
                let p2 = select(&entropies, &c2);
                prop_assert!(p1.k_target <= p2.k_target);
                prop_assert!(p1.pruned_indices.is_subset(&p2.pruned_indices));
                prop_assert_eq!(p1.pruned_indices.len() + p1.kept_indices.len(), entropies.len());
            }
        }

        #[test]
        fn low_and_high_complementary(mut entropies in prop::collection::vec(0.0f64..100.0, 1..30), k in 0usize..30) {
            entropies.dedup();
            let n = entropies.len();
            let k = k.min(n);
            let lowp = select(&entropies, &low(k as f64 / n as f64));
            let highp = select(&entropies, &PruneConfig::new((n - k) as f64 / n as f64, Strategy::HighEntropy).unwrap());
            let distinct: BTreeSet<u64> = entropies.iter().map(|e| e.to_bits()).collect();
            prop_assume!(distinct.len() == n);
            prop_assert!(lowp.pruned_indices.is_disjoint(&highp.pruned_indices));
            prop_assert_eq!(lowp.pruned_indices.len() + highp.pruned_indices.len(), n);
        }
    }
}
