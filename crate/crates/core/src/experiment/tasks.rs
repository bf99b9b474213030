//! Bundled synthetic task family with an exact answering backend.
//!
//! Task `t` asks for the sum of `K` hidden digits modulo `B`. Its trace holds
//! one key step per digit (`x{k} = {e}`, where `e` is the model's sampled
//! reading of the digit) mixed with near-deterministic filler steps. The
//! label tokens of a key step are certain; only the value token is not. The
//! reader recovers the task from the problem text, parses whatever key
//! steps survive in a prompt and answers with the posterior mode of the sum.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::client::{BackendError, CompletionBackend, FORCED_PREFIX};
use crate::backend::mock::{MockResponder, MockToken};
use crate::entropy::token_entropy_from_distribution;
use crate::reward::think_region;
use crate::rng;
use crate::segment::{split_steps, THINK_CLOSE};
use crate::trace::{TokenRecord, TraceRecord};

const FILLER_WORDS: &[&str] = &[
    "so", "we", "keep", "track", "of", "the", "running", "total", "then", "check", "each", "digit",
    "again", "carefully", "and", "note", "that", "nothing", "changes", "here",
];
const ALTERNATE_WORD: &str = " hmm";

/// Heavy-tailed padding of filler steps, used to produce long traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Elaboration {
    /// Chance that a filler step is padded.
    pub probability: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Pareto tail index of the padding length.
    pub tail_index: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyParams {
    pub n_tasks: usize,
    pub seed: u64,
    pub base: u32,
    pub keys: (usize, usize),
    pub fillers: (usize, usize),
    pub filler_tokens: (usize, usize),
    pub key_confidence: (f64, f64),
    pub filler_confidence: (f64, f64),
    pub elaboration: Option<Elaboration>,
}

impl Default for FamilyParams {
    fn default() -> Self {
        Self {
            n_tasks: 300,
            seed: 7,
            base: 10,
            keys: (2, 3),
            fillers: (9, 16),
            filler_tokens: (3, 6),
            key_confidence: (0.80, 0.95),
            filler_confidence: (0.992, 0.9995),
            elaboration: None,
        }
    }
}

impl FamilyParams {
    /// Profile with long, heavy-tailed traces for dataset building.
    pub fn long_traces(n_tasks: usize, seed: u64) -> Self {
        Self {
            n_tasks,
            seed,
            elaboration: Some(Elaboration { probability: 0.3, min_tokens: 40, max_tokens: 12_000, tail_index: 1.2 }),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let range = |name: &str, (lo, hi): (usize, usize), min: usize| {
            if lo < min || lo > hi {
                Err(format!("{name} range ({lo}, {hi}) is invalid"))
            } else {
                Ok(())
            }
        };
        range("keys", self.keys, 1)?;
        range("fillers", self.fillers, 0)?;
        range("filler_tokens", self.filler_tokens, 1)?;
        if !(2..=1000).contains(&self.base) {
            return Err(format!("base {} must be in 2..=1000", self.base));
        }
        let prob = |name: &str, (lo, hi): (f64, f64)| {
            if !(0.0 < lo && lo <= hi && hi < 1.0) {
                Err(format!("{name} range ({lo}, {hi}) must lie in (0, 1)"))
            } else {
                Ok(())
            }
        };
        prob("key_confidence", self.key_confidence)?;
        prob("filler_confidence", self.filler_confidence)?;
        if self.key_confidence.0 <= 1.0 / self.base as f64 {
            return Err("key confidence must exceed chance".into());
        }
        if let Some(e) = &self.elaboration {
            if !(0.0..=1.0).contains(&e.probability) || e.min_tokens == 0 || e.min_tokens > e.max_tokens || e.tail_index <= 0.0
            {
                return Err("invalid elaboration parameters".into());
            }
        }
        Ok(())
    }
}

/// A generated token and the distribution it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct GenToken {
    pub text: String,
    /// Probabilities of the alternatives, descending.
    pub dist: Vec<(String, f64)>,
}

impl GenToken {
    fn certain(text: impl Into<String>) -> Self {
        let text = text.into();
        Self { dist: vec![(text.clone(), 1.0)], text }
    }

    pub fn entropy_bits(&self) -> f64 {
        let probs: Vec<f64> = self.dist.iter().map(|(_, p)| *p).collect();
        token_entropy_from_distribution(&probs).expect("family distributions are normalized")
    }

    pub fn top_logprobs(&self) -> Vec<(String, f64)> {
        self.dist.iter().map(|(t, p)| (t.clone(), p.ln())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub index: usize,
    pub id: String,
    pub problem: String,
    pub true_values: Vec<u32>,
    pub confidences: Vec<f64>,
    pub emitted: Vec<u32>,
    pub ground_truth: u32,
    /// Full completion: `<think>`, `\n`, steps, `\n`, `</think>`, answer.
    pub tokens: Vec<GenToken>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFamily {
    pub params: FamilyParams,
}

fn task_id(index: usize) -> String {
    format!("task-{index:05}")
}

fn problem_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^Task (\d+):").unwrap())
}

fn key_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^x(\d+) = (\d+)$").unwrap())
}

impl SyntheticFamily {
    pub fn new(params: FamilyParams) -> Result<Self, String> {
        params.validate()?;
        Ok(Self { params })
    }

    fn uniform_in(g: &mut rand_pcg::Pcg32, (lo, hi): (usize, usize)) -> usize {
        lo + rng::below(g, (hi - lo + 1) as u32) as usize
    }

    fn lerp(g: &mut rand_pcg::Pcg32, (lo, hi): (f64, f64)) -> f64 {
        lo + (hi - lo) * rng::unit(g)
    }

    fn filler_token(g: &mut rand_pcg::Pcg32, params: &FamilyParams, first: bool) -> GenToken {
        let word = FILLER_WORDS[rng::below(g, FILLER_WORDS.len() as u32) as usize];
        let text = if first {
            let mut c = word.chars();
            c.next().map(|h| h.to_uppercase().collect::<String>() + c.as_str()).unwrap_or_default()
        } else {
            format!(" {word}")
        };
        let q = Self::lerp(g, params.filler_confidence);
        GenToken { dist: vec![(text.clone(), q), (ALTERNATE_WORD.to_string(), 1.0 - q)], text }
    }

    pub fn task(&self, index: usize) -> Task {
        let p = &self.params;
        let mut g = rng::pcg(rng::derive_seed(p.seed, &format!("task/{index}")));
        let k = Self::uniform_in(&mut g, p.keys);
        let f = Self::uniform_in(&mut g, p.fillers);
        let mut kinds: Vec<bool> = (0..k + f).map(|i| i < k).collect();
        rng::shuffle(&mut g, &mut kinds);

        let base = p.base;
        let mut true_values = Vec::with_capacity(k);
        let mut confidences = Vec::with_capacity(k);
        let mut emitted = Vec::with_capacity(k);
        let mut tokens = vec![GenToken::certain("<think>"), GenToken::certain("\n")];
        let mut key = 0;
        for (step, is_key) in kinds.iter().enumerate() {
            if step > 0 {
                tokens.push(GenToken::certain("\n\n"));
            }
            if *is_key {
                let v = rng::below(&mut g, base);
                let conf = Self::lerp(&mut g, p.key_confidence);
                let e = if rng::unit(&mut g) < conf {
                    v
                } else {
                    let r = rng::below(&mut g, base - 1);
                    if r >= v { r + 1 } else { r }
                };
                let wrong = (1.0 - conf) / (base - 1) as f64;
                let mut dist: Vec<(String, f64)> = (0..base)
                    .map(|d| (format!(" {d}"), if d == v { conf } else { wrong }))
                    .collect();
                dist.sort_by(|a, b| b.1.total_cmp(&a.1));
                tokens.push(GenToken::certain(format!("x{key}")));
                tokens.push(GenToken::certain(" ="));
                tokens.push(GenToken { text: format!(" {e}"), dist });
                true_values.push(v);
                confidences.push(conf);
                emitted.push(e);
                key += 1;
            } else {
                let mut len = Self::uniform_in(&mut g, p.filler_tokens);
                if let Some(el) = &p.elaboration {
                    if rng::unit(&mut g) < el.probability {
                        // inverse-CDF Pareto draw
                        let u = 1.0 - rng::unit(&mut g);
                        let extra = (el.min_tokens as f64 * u.powf(-1.0 / el.tail_index)).floor() as usize;
                        len += extra.min(el.max_tokens);
                    }
                }
                for i in 0..len {
                    tokens.push(Self::filler_token(&mut g, p, i == 0));
                }
            }
        }
        let answer = emitted.iter().sum::<u32>() % base;
        let ground_truth = true_values.iter().sum::<u32>() % base;
        for t in ["\n", THINK_CLOSE, "\nThe answer is ", "\\boxed{"] {
            tokens.push(GenToken::certain(t));
        }
        tokens.push(GenToken::certain(answer.to_string()));
        tokens.push(GenToken::certain("}"));
        Task {
            index,
            id: task_id(index),
            problem: format!("Task {index}: report the sum of x0 to x{} modulo {base}.", k - 1),
            true_values,
            confidences,
            emitted,
            ground_truth,
            tokens,
        }
    }

    pub fn to_trace(&self, task: &Task, with_top_logprobs: bool) -> TraceRecord {
        let tokens = task
            .tokens
            .iter()
            .map(|t| {
                let mut r = TokenRecord::with_entropy(t.text.clone(), t.entropy_bits());
                if with_top_logprobs {
                    r.top_logprobs = Some(t.top_logprobs());
                }
                r
            })
            .collect();
        let mut record = TraceRecord::from_tokens(task.id.clone(), task.problem.clone(), tokens);
        record.ground_truth = Some(task.ground_truth.to_string());
        record.meta.insert("source".into(), json!("synthetic_family"));
        record.meta.insert("family_seed".into(), json!(self.params.seed));
        record
    }

    pub fn trace(&self, index: usize) -> TraceRecord {
        self.to_trace(&self.task(index), false)
    }

    /// All `n_tasks` traces, generated lazily.
    pub fn traces(&self) -> impl Iterator<Item = TraceRecord> + '_ {
        (0..self.params.n_tasks).map(|i| self.trace(i))
    }

    pub fn task_index(problem: &str) -> Option<usize> {
        problem_re().captures(problem.trim_start())?[1].parse().ok()
    }

    /// Posterior mode of the digit sum given the keys visible in `think`.
    pub fn read(&self, index: usize, think: &str) -> u32 {
        let task = self.task(index);
        let base = self.params.base as usize;
        let mut seen: Vec<Option<u32>> = vec![None; task.confidences.len()];
        for r in split_steps(think) {
            if let Some(c) = key_re().captures(think[r].trim()) {
                if let (Ok(k), Ok(v)) = (c[1].parse::<usize>(), c[2].parse::<u32>()) {
                    if k < seen.len() && (v as usize) < base {
                        seen[k] = Some(v);
                    }
                }
            }
        }
        // any unseen digit makes the sum exactly uniform
        if seen.iter().any(Option::is_none) {
            return 0;
        }
        let mut post = vec![0.0; base];
        post[0] = 1.0;
        for (k, e) in seen.iter().enumerate() {
            let e = e.expect("all seen") as usize;
            let conf = task.confidences[k];
            let wrong = (1.0 - conf) / (base - 1) as f64;
            let mut next = vec![0.0; base];
            for (s, ps) in post.iter().enumerate() {
                for (d, slot) in (0..base).map(|d| (d, (s + d) % base)) {
                    next[slot] += ps * if d == e { conf } else { wrong };
                }
            }
            post = next;
        }
        let mut best = 0;
        for (d, p) in post.iter().enumerate() {
            if *p > post[best] {
                best = d;
            }
        }
        best as u32
    }
}

/// The exact answering model for the family.
#[derive(Debug, Clone)]
pub struct SyntheticReader {
    pub family: SyntheticFamily,
}

impl SyntheticReader {
    pub fn new(family: SyntheticFamily) -> Self {
        Self { family }
    }

    fn answer(&self, prompt: &str) -> Result<u32, BackendError> {
        let index = SyntheticFamily::task_index(prompt)
            .ok_or_else(|| BackendError::Protocol("prompt does not name a synthetic task".into()))?;
        Ok(self.family.read(index, think_region(prompt)))
    }
}

impl CompletionBackend for SyntheticReader {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        Ok(format!("\\boxed{{{}}}", self.answer(prompt)?))
    }

    fn identity(&self) -> String {
        format!("synthetic-exact:seed={}", self.family.params.seed)
    }
}

/// Serves family traces for generation prompts and reader answers for
/// compressed-inference prompts.
impl MockResponder for SyntheticReader {
    fn respond(&self, prompt: &str) -> Option<Vec<MockToken>> {
        let index = SyntheticFamily::task_index(prompt)?;
        if prompt.ends_with(&format!("{THINK_CLOSE}\n")) {
            let text = self.complete(prompt).ok()?;
            return Some(vec![MockToken { top: vec![(text.clone(), 0.0)], text }]);
        }
        let task = self.family.task(index);
        if prompt != format!("{}\n{FORCED_PREFIX}", task.problem) {
            return None;
        }
        Some(
            task.tokens[2..]
                .iter()
                .map(|t| MockToken { text: t.text.clone(), top: t.top_logprobs() })
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::segment;

    fn family() -> SyntheticFamily {
        SyntheticFamily::new(FamilyParams::default()).unwrap()
    }

    #[test]
    fn traces_segment_into_key_and_filler_steps() {
        let f = family();
        for i in 0..50 {
            let task = f.task(i);
            let trace = f.to_trace(&task, true);
            trace.validate().unwrap();
            let s = segment(&trace).unwrap();
            let keys: Vec<_> = s.steps.iter().filter(|st| key_re().is_match(&st.text)).collect();
            assert_eq!(keys.len(), task.confidences.len());
            let min_key = keys.iter().map(|k| k.entropy_bits).fold(f64::INFINITY, f64::min);
            let max_filler = s
                .steps
                .iter()
                .filter(|st| !key_re().is_match(&st.text))
                .map(|st| st.entropy_bits)
                .fold(0.0, f64::max);
            assert!(max_filler < min_key, "task {i}: filler {max_filler} vs key {min_key}");
            assert!(trace.raw_completion.starts_with(FORCED_PREFIX));
        }
    }

    #[test]
    fn reader_agrees_with_model_on_full_trace() {
        let f = family();
        let reader = SyntheticReader::new(f.clone());
        for i in 0..50 {
            let task = f.task(i);
            let trace = f.to_trace(&task, false);
            let s = segment(&trace).unwrap();
            let prompt = crate::prune::build_prompt(&task.problem, s.think_text());
            let answer = task.emitted.iter().sum::<u32>() % 10;
            assert_eq!(reader.complete(&prompt).unwrap(), format!("\\boxed{{{answer}}}"));
        }
    }

    #[test]
    fn unseen_key_gives_lowest_digit() {
        let f = family();
        assert_eq!(f.read(3, "nothing here"), 0);
        assert!(SyntheticReader::new(f).complete("no task").is_err());
    }

    #[test]
    fn deterministic_generation() {
        let f = family();
        assert_eq!(f.task(17), f.task(17));
        assert_ne!(f.task(17).tokens, f.task(18).tokens);
    }
}
