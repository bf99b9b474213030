//! Exact information quantities of a synthetic LM's steps and answer.
//!
//! Each step and the answer become one random variable whose value is the
//! block's symbol tuple. Everything is computed from marginal entropies of the
//! enumerated joint.

use std::cell::RefCell;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::backend::synth::{exact_joint, JointDistribution, StepLayout, SynthError, SyntheticLm};
use crate::rng;

/// Slack for comparing exact quantities computed in floating point.
pub const MI_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiStep {
    pub j: usize,
    /// I(S_j; A | all other steps).
    pub mi_bits: f64,
    /// H(S_j | S_<j).
    pub bound_bits: f64,
    /// Expected summed token entropy of step j; equals the bound by the chain rule.
    pub token_entropy_bits: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTerm {
    pub step: usize,
    /// I(S_k; A | C minus the subset steps up to and including k).
    pub mi_bits: f64,
    /// H(S_k | S_<k).
    pub bound_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateBound {
    /// Subset indices in descending order.
    pub subset: Vec<usize>,
    /// I(subset; A | C minus subset).
    pub joint_mi_bits: f64,
    pub terms: Vec<AggregateTerm>,
    pub terms_sum_bits: f64,
    pub bound_sum_bits: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiReport {
    pub steps: Vec<MiStep>,
    pub aggregate: AggregateBound,
    pub all_hold: bool,
}

pub struct MiAnalysis {
    n_steps: usize,
    /// Per sequence: interned value of each step, then of the answer.
    values: Vec<(Vec<u32>, f64)>,
    token_entropy: Vec<f64>,
    cache: RefCell<HashMap<u32, f64>>,
}

impl MiAnalysis {
    pub fn new(lm: &SyntheticLm, max_len: usize) -> Result<Self, SynthError> {
        Ok(Self::from_joint(lm, &exact_joint(lm, max_len)?))
    }

    pub fn from_joint(lm: &SyntheticLm, joint: &JointDistribution) -> Self {
        let (step_pos, answer_pos) = lm.layout.positions();
        let n_steps = step_pos.len();
        let mut blocks: Vec<Vec<usize>> = step_pos;
        blocks.push(answer_pos);
        let mut interners: Vec<HashMap<Vec<usize>, u32>> = vec![HashMap::new(); blocks.len()];
        let mut token_entropy = vec![0.0; n_steps];
        let values = joint
            .sequences
            .iter()
            .map(|(seq, p)| {
                let bits = lm.token_entropies(seq);
                for (j, pos) in blocks[..n_steps].iter().enumerate() {
                    token_entropy[j] += p * pos.iter().map(|&i| bits[i]).sum::<f64>();
                }
                let ids = blocks
                    .iter()
                    .zip(interners.iter_mut())
                    .map(|(pos, table)| {
                        let tuple: Vec<usize> = pos.iter().map(|&i| seq[i]).collect();
                        let next = table.len() as u32;
                        *table.entry(tuple).or_insert(next)
                    })
                    .collect();
                (ids, *p)
            })
            .collect();
        Self { n_steps, values, token_entropy, cache: RefCell::new(HashMap::new()) }
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn answer_mask(&self) -> u32 {
        1 << self.n_steps
    }

    pub fn steps_mask(&self, steps: impl IntoIterator<Item = usize>) -> u32 {
        steps.into_iter().fold(0, |m, j| m | (1 << j))
    }

    /// Joint entropy of the variables in `mask`.
    pub fn entropy(&self, mask: u32) -> f64 {
        if let Some(h) = self.cache.borrow().get(&mask) {
            return *h;
        }
        let vars: Vec<usize> = (0..=self.n_steps).filter(|v| mask & (1 << v) != 0).collect();
        let mut groups: HashMap<Vec<u32>, f64> = HashMap::new();
        for (ids, p) in &self.values {
            *groups.entry(vars.iter().map(|&v| ids[v]).collect()).or_insert(0.0) += p;
        }
        let h = groups.values().filter(|p| **p > 0.0).map(|p| -p * p.log2()).sum::<f64>().max(0.0);
        self.cache.borrow_mut().insert(mask, h);
        h
    }

    /// I(X; Y | Z) for disjoint masks.
    pub fn cond_mi(&self, x: u32, y: u32, z: u32) -> f64 {
        self.entropy(x | z) + self.entropy(y | z) - self.entropy(z) - self.entropy(x | y | z)
    }

    /// H(X | Z).
    pub fn cond_entropy(&self, x: u32, z: u32) -> f64 {
        self.entropy(x | z) - self.entropy(z)
    }

    fn all_steps(&self) -> u32 {
        self.answer_mask() - 1
    }

    pub fn step_bound(&self, j: usize) -> f64 {
        self.cond_entropy(1 << j, self.steps_mask(0..j))
    }

    pub fn step_mi(&self, j: usize) -> f64 {
        self.cond_mi(1 << j, self.answer_mask(), self.all_steps() & !(1 << j))
    }

    pub fn steps(&self) -> Vec<MiStep> {
        (0..self.n_steps)
            .map(|j| {
                let mi_bits = self.step_mi(j);
                let bound_bits = self.step_bound(j);
                MiStep {
                    j,
                    mi_bits,
                    bound_bits,
                    token_entropy_bits: self.token_entropy[j],
                    holds: mi_bits <= bound_bits + MI_TOLERANCE,
                }
            })
            .collect()
    }

    /// Chain-rule decomposition of I(subset; A | rest), indices taken in
    /// descending order.
    pub fn aggregate(&self, subset: &[usize]) -> AggregateBound {
        let mut desc: Vec<usize> = subset.to_vec();
        desc.sort_unstable_by(|a, b| b.cmp(a));
        desc.dedup();
        let sub = self.steps_mask(desc.iter().copied());
        let rest = self.all_steps() & !sub;
        let joint_mi_bits = self.cond_mi(sub, self.answer_mask(), rest);
        let mut removed = 0u32;
        let terms: Vec<AggregateTerm> = desc
            .iter()
            .map(|&k| {
                removed |= 1 << k;
                AggregateTerm {
                    step: k,
                    mi_bits: self.cond_mi(1 << k, self.answer_mask(), self.all_steps() & !removed),
                    bound_bits: self.step_bound(k),
                }
            })
            .collect();
        let terms_sum_bits: f64 = terms.iter().map(|t| t.mi_bits).sum();
        let bound_sum_bits: f64 = terms.iter().map(|t| t.bound_bits).sum();
        let holds = joint_mi_bits <= bound_sum_bits + MI_TOLERANCE
            && (joint_mi_bits - terms_sum_bits).abs() <= MI_TOLERANCE
            && terms.iter().all(|t| t.mi_bits <= t.bound_bits + MI_TOLERANCE);
        AggregateBound { subset: desc, joint_mi_bits, terms, terms_sum_bits, bound_sum_bits, holds }
    }
}

/// Ranges for drawing random enumerable lms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiParams {
    pub models: usize,
    pub seed: u64,
    pub steps: (usize, usize),
    /// Content symbols; the vocabulary adds the three structural ones.
    pub vocab: (usize, usize),
    pub order: (usize, usize),
    pub step_len: (usize, usize),
    pub answer_len: usize,
    /// Longest stream, structural symbols included.
    pub max_len: usize,
    /// Size of the low-entropy subset for the aggregate bound; `None` means half the steps, rounded up.
    pub subset_size: Option<usize>,
}

impl Default for MiParams {
    fn default() -> Self {
        Self {
            models: 100,
            seed: 1,
            steps: (3, 4),
            vocab: (2, 3),
            order: (1, 3),
            step_len: (1, 2),
            answer_len: 1,
            max_len: 12,
            subset_size: None,
        }
    }
}

impl MiParams {
    pub fn validate(&self) -> Result<(), String> {
        for (name, (lo, hi)) in [("steps", self.steps), ("vocab", self.vocab), ("step_len", self.step_len)] {
            if lo == 0 || lo > hi {
                return Err(format!("{name} range ({lo}, {hi}) is invalid"));
            }
        }
        if self.order.0 > self.order.1 || self.order.1 > crate::backend::synth::MAX_ORDER {
            return Err(format!("order range {:?} is invalid", self.order));
        }
        let shortest = StepLayout::new(vec![1; self.steps.0], self.answer_len).len();
        if shortest > self.max_len {
            return Err(format!("{} steps need at least {shortest} symbols, max_len is {}", self.steps.0, self.max_len));
        }
        Ok(())
    }

    /// The `i`-th random model. Step lengths are shortened, longest first,
    /// until the layout fits in `max_len`.
    pub fn model(&self, i: usize) -> Result<SyntheticLm, SynthError> {
        let mut g = rng::pcg(rng::derive_seed(self.seed, &format!("mi/{i}")));
        let mut pick = |(lo, hi): (usize, usize)| lo + rng::below(&mut g, (hi - lo + 1) as u32) as usize;
        let n = pick(self.steps);
        let vocab = pick(self.vocab);
        let order = pick(self.order);
        let mut lens: Vec<usize> = (0..n).map(|_| pick(self.step_len)).collect();
        while StepLayout::new(lens.clone(), self.answer_len).len() > self.max_len {
            let Some(longest) = (0..n).filter(|&j| lens[j] > 1).max_by_key(|&j| (lens[j], std::cmp::Reverse(j))) else {
                break;
            };
            lens[longest] -= 1;
        }
        let lm_seed = rng::derive_seed(self.seed, &format!("mi/{i}/lm"));
        SyntheticLm::random(lm_seed, vocab, order, StepLayout::new(lens, self.answer_len))
    }

    pub fn subset_size_for(&self, n_steps: usize) -> usize {
        self.subset_size.unwrap_or(n_steps.div_ceil(2)).min(n_steps)
    }
}

/// The `size` steps with the smallest bound, ties to the lower index.
pub fn low_entropy_subset(steps: &[MiStep], size: usize) -> Vec<usize> {
    let mut order: Vec<&MiStep> = steps.iter().collect();
    order.sort_by(|a, b| a.bound_bits.total_cmp(&b.bound_bits).then(a.j.cmp(&b.j)));
    order.into_iter().take(size).map(|s| s.j).collect()
}

/// Per-step bound check plus the aggregate bound on the `subset_size`
/// lowest-entropy steps.
pub fn mi_oracle(lm: &SyntheticLm, max_len: usize, subset_size: usize) -> Result<MiReport, SynthError> {
    let analysis = MiAnalysis::new(lm, max_len)?;
    let steps = analysis.steps();
    let aggregate = analysis.aggregate(&low_entropy_subset(&steps, subset_size));
    let all_hold = aggregate.holds && steps.iter().all(|s| s.holds);
    Ok(MiReport { steps, aggregate, all_hold })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::synth::{FIRST_CONTENT, SYM_CLOSE, SYM_DELIM};

    #[test]
    fn deterministic_step_has_zero_bound_and_mi() {
        // step 1 is forced to "a"; step 0 and the answer are free
        let lm = SyntheticLm::from_fn(vec!["a".into(), "b".into()], 1, StepLayout::new(vec![1, 1], 1), 0, |ctx| {
            if ctx == [SYM_DELIM] {
                vec![(FIRST_CONTENT, 1.0)]
            } else {
                vec![(FIRST_CONTENT, 0.5), (FIRST_CONTENT + 1, 0.5)]
            }
        })
        .unwrap();
        let a = MiAnalysis::new(&lm, 16).unwrap();
        assert!(a.step_bound(1).abs() < 1e-12);
        assert!(a.step_mi(1).abs() < 1e-12);
        assert!((a.step_bound(0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_answer_has_zero_mi() {
        let lm = SyntheticLm::from_fn(
            vec!["a".into(), "b".into(), "c".into()],
            0,
            StepLayout::new(vec![1, 2], 1),
            0,
            |_| vec![(FIRST_CONTENT, 0.2), (FIRST_CONTENT + 1, 0.3), (FIRST_CONTENT + 2, 0.5)],
        )
        .unwrap();
        let report = mi_oracle(&lm, 16, 2).unwrap();
        for s in &report.steps {
            assert!(s.mi_bits.abs() < 1e-12);
            assert!((s.bound_bits - s.token_entropy_bits).abs() < 1e-9);
        }
        assert!(report.all_hold);
    }

    #[test]
    fn copied_answer_saturates_bound() {
        // order 3 lets the answer see the last step through the closing tag
        let lm = SyntheticLm::from_fn(vec!["a".into(), "b".into()], 3, StepLayout::new(vec![1, 1], 1), 0, |ctx| {
            match ctx {
                [_, s, c] if *c == SYM_CLOSE => vec![(*s, 1.0)],
                _ => vec![(FIRST_CONTENT, 0.5), (FIRST_CONTENT + 1, 0.5)],
            }
        })
        .unwrap();
        let a = MiAnalysis::new(&lm, 16).unwrap();
        assert!((a.step_mi(1) - 1.0).abs() < 1e-12);
        assert!((a.step_bound(1) - 1.0).abs() < 1e-12);
        assert!(a.step_mi(0).abs() < 1e-12);
        let agg = a.aggregate(&[0, 1]);
        assert_eq!(agg.subset, vec![1, 0]);
        assert!((agg.joint_mi_bits - 1.0).abs() < 1e-12);
        assert!(agg.holds);
    }

    #[test]
    fn random_models_fit_the_length_budget() {
        let params = MiParams::default();
        params.validate().unwrap();
        for i in 0..20 {
            let lm = params.model(i).unwrap();
            assert!(lm.layout.len() <= params.max_len);
            assert!((3..=4).contains(&lm.layout.step_lens.len()));
            assert!(lm.vocab.len() <= 6);
        }
    }
}
