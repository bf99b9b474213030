//! A small order-m Markov LM with exact conditionals, used to synthesize
//! Exact-mode traces and to enumerate full joint distributions.
//!
//! The stream is `<think>`, step 0, `"\n\n"`, step 1, ..., `</think>`, answer.
//! Structural symbols sit at positions fixed by a [`StepLayout`] and carry no
//! uncertainty; every other position is drawn from the row of its context,
//! the last `order` symbols of the stream so far.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::entropy::token_entropy_from_distribution;
use crate::rng;
use crate::trace::{TokenRecord, TraceRecord};

pub const SYM_OPEN: usize = 0;
pub const SYM_CLOSE: usize = 1;
pub const SYM_DELIM: usize = 2;
pub const FIRST_CONTENT: usize = 3;
pub const MAX_ORDER: usize = 3;
/// Most sequences `exact_joint` will enumerate.
pub const ENUMERATION_LIMIT: usize = 10_000_000;
/// Longest stream `synth_generate` will emit.
pub const LENGTH_CAP: usize = 16_384;
const ROW_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic lm: {0}")]
    Invalid(String),
    #[error("sequence reached {len} symbols without closing the think block (cap {cap})")]
    NonTermination { len: usize, cap: usize },
    #[error("enumeration too large: {0}")]
    Explosion(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepLayout {
    pub step_lens: Vec<usize>,
    pub answer_len: usize,
}

/// What occupies one stream position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Forced(usize),
    Step(usize),
    Answer,
}

impl StepLayout {
    pub fn new(step_lens: Vec<usize>, answer_len: usize) -> Self {
        Self { step_lens, answer_len }
    }

    pub fn slots(&self) -> Vec<Slot> {
        let mut slots = vec![Slot::Forced(SYM_OPEN)];
        for (j, &len) in self.step_lens.iter().enumerate() {
            if j > 0 {
                slots.push(Slot::Forced(SYM_DELIM));
            }
            slots.extend(std::iter::repeat_n(Slot::Step(j), len));
        }
        slots.push(Slot::Forced(SYM_CLOSE));
        slots.extend(std::iter::repeat_n(Slot::Answer, self.answer_len));
        slots
    }

    pub fn len(&self) -> usize {
        let steps: usize = self.step_lens.iter().sum();
        2 + steps + self.step_lens.len().saturating_sub(1) + self.answer_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stream positions of each step and of the answer.
    pub fn positions(&self) -> (Vec<Vec<usize>>, Vec<usize>) {
        let mut steps = vec![Vec::new(); self.step_lens.len()];
        let mut answer = Vec::new();
        for (pos, slot) in self.slots().into_iter().enumerate() {
            match slot {
                Slot::Step(j) => steps[j].push(pos),
                Slot::Answer => answer.push(pos),
                Slot::Forced(_) => {}
            }
        }
        (steps, answer)
    }
}

pub type Row = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLm {
    /// Symbol texts; the first three are `<think>`, `</think>` and `"\n\n"`.
    pub vocab: Vec<String>,
    pub order: usize,
    pub layout: StepLayout,
    /// Sparse conditional rows keyed by context.
    pub transition: BTreeMap<Vec<usize>, Row>,
    pub seed: u64,
}

fn context_of(prefix: &[usize], order: usize) -> &[usize] {
    &prefix[prefix.len().saturating_sub(order)..]
}

fn structural_vocab(content: Vec<String>) -> Vec<String> {
    let mut vocab = vec!["<think>".to_string(), "</think>".to_string(), "\n\n".to_string()];
    vocab.extend(content);
    vocab
}

impl SyntheticLm {
    /// Builds an lm whose row for each reachable context is `row(context)`.
    /// Contexts are visited in a fixed order, so a seeded `row` gives a
    /// reproducible model.
    pub fn from_fn(
        content: Vec<String>,
        order: usize,
        layout: StepLayout,
        seed: u64,
        mut row: impl FnMut(&[usize]) -> Row,
    ) -> Result<Self, SynthError> {
        if order > MAX_ORDER {
            return Err(SynthError::Invalid(format!("order {order} exceeds {MAX_ORDER}")));
        }
        let slots = layout.slots();
        let mut transition: BTreeMap<Vec<usize>, Row> = BTreeMap::new();
        // frontier of distinct contexts at the current position
        let mut frontier: BTreeSet<Vec<usize>> = BTreeSet::from([Vec::new()]);
        for slot in &slots {
            let mut next = BTreeSet::new();
            for ctx in &frontier {
                let successors: Vec<usize> = match slot {
                    Slot::Forced(sym) => vec![*sym],
                    Slot::Step(_) | Slot::Answer => {
                        let r = transition.entry(ctx.clone()).or_insert_with(|| row(ctx));
                        r.iter().filter(|(_, p)| *p > 0.0).map(|(s, _)| *s).collect()
                    }
                };
                for sym in successors {
                    let mut extended = ctx.clone();
                    extended.push(sym);
                    next.insert(context_of(&extended, order).to_vec());
                }
            }
            frontier = next;
        }
        let lm = Self { vocab: structural_vocab(content), order, layout, transition, seed };
        lm.validate()?;
        Ok(lm)
    }

    /// Random lm with sparse rows of support 1 to 3 over `n_content` symbols.
    pub fn random(seed: u64, n_content: usize, order: usize, layout: StepLayout) -> Result<Self, SynthError> {
        if n_content == 0 {
            return Err(SynthError::Invalid("need at least one content symbol".into()));
        }
        let mut g = rng::pcg(seed);
        let content = (0..n_content).map(|i| char::from(b'a' + (i % 26) as u8).to_string()).collect();
        Self::from_fn(content, order, layout, seed, |_| {
            let support = (1 + rng::below(&mut g, 3) as usize).min(n_content);
            let mut symbols: Vec<usize> = (FIRST_CONTENT..FIRST_CONTENT + n_content).collect();
            rng::shuffle(&mut g, &mut symbols);
            let weights: Vec<f64> = (0..support).map(|_| 0.05 + rng::unit(&mut g)).collect();
            let total: f64 = weights.iter().sum();
            symbols.into_iter().zip(weights).map(|(s, w)| (s, w / total)).collect()
        })
    }

    pub fn row(&self, prefix: &[usize]) -> Option<&Row> {
        self.transition.get(context_of(prefix, self.order))
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.order > MAX_ORDER {
            return bad(format!("order {} exceeds {MAX_ORDER}", self.order));
        }
        if self.vocab.len() <= FIRST_CONTENT
            || self.vocab[SYM_OPEN] != "<think>"
            || self.vocab[SYM_CLOSE] != "</think>"
            || self.vocab[SYM_DELIM] != "\n\n"
        {
            return bad("vocab must start with <think>, </think>, \\n\\n and hold content symbols".into());
        }
        for text in &self.vocab[FIRST_CONTENT..] {
            if text.is_empty() || text.contains('\n') || text.contains('<') || text.trim().is_empty() {
                return bad(format!("content symbol {text:?} must be non-blank without newlines or '<'"));
            }
        }
        if self.layout.step_lens.is_empty() || self.layout.step_lens.contains(&0) {
            return bad("layout needs at least one step, each of length >= 1".into());
        }
        for (ctx, row) in &self.transition {
            let mut sum = 0.0;
            for &(sym, p) in row {
                if !(FIRST_CONTENT..self.vocab.len()).contains(&sym) {
                    return bad(format!("row {ctx:?} emits non-content symbol {sym}"));
                }
                if !p.is_finite() || p < 0.0 {
                    return bad(format!("row {ctx:?} has probability {p}"));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return bad(format!("row {ctx:?} sums to {sum}"));
            }
        }
        // every reachable context has a row
        count_sequences(self, &self.layout.slots())?;
        Ok(())
    }

    /// Entropy in bits of a row.
    pub fn row_entropy(row: &Row) -> f64 {
        let probs: Vec<f64> = row.iter().map(|(_, p)| *p).collect();
        token_entropy_from_distribution(&probs).unwrap_or(0.0)
    }

    /// Per-position token entropies along a full symbol sequence.
    pub fn token_entropies(&self, seq: &[usize]) -> Vec<f64> {
        self.layout
            .slots()
            .iter()
            .enumerate()
            .map(|(pos, slot)| match slot {
                Slot::Forced(_) => 0.0,
                _ => self.row(&seq[..pos]).map_or(0.0, Self::row_entropy),
            })
            .collect()
    }

    pub fn render(&self, symbols: &[usize]) -> String {
        symbols.iter().map(|&s| self.vocab[s].as_str()).collect()
    }
}

/// Samples one trace. Every token carries its exact entropy.
pub fn synth_generate(problem_id: &str, lm: &SyntheticLm) -> Result<TraceRecord, SynthError> {
    let slots = lm.layout.slots();
    if slots.len() > LENGTH_CAP {
        return Err(SynthError::NonTermination { len: slots.len(), cap: LENGTH_CAP });
    }
    let mut g = rng::pcg(rng::derive_seed(lm.seed, problem_id));
    let mut seq = Vec::with_capacity(slots.len());
    let mut tokens = Vec::with_capacity(slots.len());
    for slot in &slots {
        let (sym, bits) = match slot {
            Slot::Forced(sym) => (*sym, 0.0),
            _ => {
                let row = lm
                    .row(&seq)
                    .ok_or_else(|| SynthError::Invalid(format!("no row for context of position {}", seq.len())))?;
                let weights: Vec<f64> = row.iter().map(|(_, p)| *p).collect();
                (row[rng::categorical(&mut g, &weights)].0, SyntheticLm::row_entropy(row))
            }
        };
        seq.push(sym);
        tokens.push(TokenRecord::with_entropy(lm.vocab[sym].clone(), bits));
    }
    let (_, answer_pos) = lm.layout.positions();
    let answer: Vec<usize> = answer_pos.iter().map(|&p| seq[p]).collect();
    let mut record = TraceRecord::from_tokens(problem_id, format!("Synthetic problem {problem_id}"), tokens);
    record.ground_truth = Some(lm.render(&answer));
    record.meta.insert("source".into(), json!("synthetic_lm"));
    record.meta.insert("lm_seed".into(), json!(lm.seed));
    Ok(record)
}

/// Every positive-probability full sequence with its probability.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    pub sequences: Vec<(Vec<usize>, f64)>,
}

impl JointDistribution {
    pub fn total_mass(&self) -> f64 {
        self.sequences.iter().map(|(_, p)| p).sum()
    }
}

pub fn exact_joint(lm: &SyntheticLm, max_len: usize) -> Result<JointDistribution, SynthError> {
    let slots = lm.layout.slots();
    if slots.len() > max_len {
        return Err(SynthError::Explosion(format!(
            "layout needs {} symbols, max_len is {max_len}",
            slots.len()
        )));
    }
    let count = count_sequences(lm, &slots)?;
    if count > ENUMERATION_LIMIT as u128 {
        return Err(SynthError::Explosion(format!("{count} sequences exceed {ENUMERATION_LIMIT}")));
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut prefix = Vec::with_capacity(slots.len());
    expand(lm, &slots, &mut prefix, 1.0, &mut out)?;
    Ok(JointDistribution { sequences: out })
}

/// Number of positive-probability sequences, by dynamic programming over
/// (position, context) so nothing is enumerated.
pub fn count_sequences(lm: &SyntheticLm, slots: &[Slot]) -> Result<u128, SynthError> {
    let successors = |slot: Slot, ctx: &[usize]| -> Result<Vec<usize>, SynthError> {
        match slot {
            Slot::Forced(sym) => Ok(vec![sym]),
            _ => lm
                .transition
                .get(ctx)
                .map(|r| r.iter().filter(|(_, p)| *p > 0.0).map(|(s, _)| *s).collect())
                .ok_or_else(|| SynthError::Invalid(format!("reachable context {ctx:?} has no row"))),
        }
    };
    let extend = |ctx: &[usize], sym: usize| {
        let mut e = ctx.to_vec();
        e.push(sym);
        context_of(&e, lm.order).to_vec()
    };
    let mut frontiers: Vec<BTreeSet<Vec<usize>>> = vec![BTreeSet::from([Vec::new()])];
    for &slot in slots {
        let mut next = BTreeSet::new();
        for ctx in frontiers.last().expect("non-empty") {
            for sym in successors(slot, ctx)? {
                next.insert(extend(ctx, sym));
            }
        }
        frontiers.push(next);
    }
    let mut counts: BTreeMap<Vec<usize>, u128> = frontiers[slots.len()].iter().map(|c| (c.clone(), 1)).collect();
    for pos in (0..slots.len()).rev() {
        let mut here = BTreeMap::new();
        for ctx in &frontiers[pos] {
            let mut n: u128 = 0;
            for sym in successors(slots[pos], ctx)? {
                n = n.saturating_add(counts[&extend(ctx, sym)]);
            }
            here.insert(ctx.clone(), n);
        }
        counts = here;
    }
    Ok(counts[&Vec::new()])
}

fn expand(
    lm: &SyntheticLm,
    slots: &[Slot],
    prefix: &mut Vec<usize>,
    prob: f64,
    out: &mut Vec<(Vec<usize>, f64)>,
) -> Result<(), SynthError> {
    let pos = prefix.len();
    if pos == slots.len() {
        if out.len() >= ENUMERATION_LIMIT {
            return Err(SynthError::Explosion(format!("more than {ENUMERATION_LIMIT} sequences")));
        }
        out.push((prefix.clone(), prob));
        return Ok(());
    }
    match slots[pos] {
        Slot::Forced(sym) => {
            prefix.push(sym);
            expand(lm, slots, prefix, prob, out)?;
            prefix.pop();
        }
        _ => {
            let row = lm
                .row(prefix)
                .ok_or_else(|| SynthError::Invalid(format!("no row for context at position {pos}")))?;
            for &(sym, p) in row {
                if p > 0.0 {
                    prefix.push(sym);
                    expand(lm, slots, prefix, prob * p, out)?;
                    prefix.pop();
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::segment;

    fn one_hot_lm() -> SyntheticLm {
        SyntheticLm::from_fn(vec!["a".into(), "b".into()], 1, StepLayout::new(vec![2, 1], 1), 3, |ctx| {
            let last = ctx.last().copied().unwrap_or(SYM_OPEN);
            vec![(if last == FIRST_CONTENT { FIRST_CONTENT + 1 } else { FIRST_CONTENT }, 1.0)]
        })
        .unwrap()
    }

    #[test]
    fn one_hot_lm_is_deterministic() {
        let lm = one_hot_lm();
        let t = synth_generate("p", &lm).unwrap();
        assert!(t.tokens.iter().all(|t| t.entropy_bits == Some(0.0)));
        assert_eq!(t.raw_completion, "<think>ab\n\na</think>a");
        let joint = exact_joint(&lm, 32).unwrap();
        assert_eq!(joint.sequences.len(), 1);
        assert_eq!(joint.sequences[0].1, 1.0);
    }

    #[test]
    fn uniform_row_gives_one_bit() {
        let lm = SyntheticLm::from_fn(vec!["a".into(), "b".into()], 0, StepLayout::new(vec![1], 1), 0, |_| {
            vec![(FIRST_CONTENT, 0.5), (FIRST_CONTENT + 1, 0.5)]
        })
        .unwrap();
        let t = synth_generate("p", &lm).unwrap();
        let bits: Vec<f64> = t.tokens.iter().map(|t| t.entropy_bits.unwrap()).collect();
        assert_eq!(bits, [0.0, 1.0, 0.0, 1.0]);
        let s = segment(&t).unwrap();
        assert_eq!(s.steps.len(), 1);
        assert_eq!(s.steps[0].entropy_bits, 1.0);
    }

    #[test]
    fn generation_is_reproducible() {
        let lm = SyntheticLm::random(11, 4, 2, StepLayout::new(vec![3, 2, 2], 2)).unwrap();
        let a = synth_generate("id-7", &lm).unwrap();
        let b = synth_generate("id-7", &lm).unwrap();
        assert_eq!(crate::trace::serialize_trace(&a), crate::trace::serialize_trace(&b));
        a.validate().unwrap();
    }

    #[test]
    fn order_one_three_symbols_enumerates_and_normalizes() {
        let layout = StepLayout::new(vec![1, 1], 1);
        let lm = SyntheticLm::random(5, 3, 1, layout).unwrap();
        let joint = exact_joint(&lm, 8).unwrap();
        assert!(joint.sequences.len() <= 27);
        assert!((joint.total_mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn independent_uniform_steps_multiply() {
        let lm = SyntheticLm::from_fn(
            vec!["a".into(), "b".into(), "c".into()],
            0,
            StepLayout::new(vec![1, 1], 1),
            0,
            |_| (FIRST_CONTENT..FIRST_CONTENT + 3).map(|s| (s, 1.0 / 3.0)).collect(),
        )
        .unwrap();
        let joint = exact_joint(&lm, 16).unwrap();
        assert_eq!(joint.sequences.len(), 27);
        for (_, p) in &joint.sequences {
            assert!((p - 1.0 / 27.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_models() {
        let layout = StepLayout::new(vec![1], 1);
        let bad_sum = SyntheticLm::from_fn(vec!["a".into()], 0, layout.clone(), 0, |_| vec![(FIRST_CONTENT, 0.9)]);
        assert!(matches!(bad_sum, Err(SynthError::Invalid(_))));
        let bad_text = SyntheticLm::from_fn(vec!["<a".into()], 0, layout.clone(), 0, |_| vec![(FIRST_CONTENT, 1.0)]);
        assert!(matches!(bad_text, Err(SynthError::Invalid(_))));
        let mut lm = SyntheticLm::random(1, 2, 1, layout).unwrap();
        lm.transition.clear();
        assert!(matches!(lm.validate(), Err(SynthError::Invalid(_))));
        assert!(matches!(SyntheticLm::random(1, 2, 4, StepLayout::new(vec![1], 1)), Err(SynthError::Invalid(_))));
    }

    #[test]
    fn explosion_and_length_cap() {
        let lm = SyntheticLm::random(2, 3, 1, StepLayout::new(vec![2, 2], 1)).unwrap();
        assert!(matches!(exact_joint(&lm, 4), Err(SynthError::Explosion(_))));
        let wide = SyntheticLm::from_fn(
            (0..10).map(|i| format!("s{i}")).collect(),
            0,
            StepLayout::new(vec![8], 0),
            0,
            |_| (FIRST_CONTENT..FIRST_CONTENT + 10).map(|s| (s, 0.1)).collect(),
        )
        .unwrap();
        assert!(matches!(exact_joint(&wide, 64), Err(SynthError::Explosion(_))));
        let long = SyntheticLm::from_fn(vec!["a".into()], 0, StepLayout::new(vec![LENGTH_CAP], 0), 0, |_| {
            vec![(FIRST_CONTENT, 1.0)]
        })
        .unwrap();
        assert!(matches!(synth_generate("x", &long), Err(SynthError::NonTermination { .. })));
    }
}
