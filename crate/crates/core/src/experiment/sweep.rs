//! Mask-ratio sweeps with per-trace checkpointing.
//!
//! Every trace is evaluated under every (series, ratio) cell; the per-trace
//! outcomes are appended to a checkpoint as soon as a chunk finishes, keyed by
//! config hash and trace id. Aggregation only sums integers, so the report does
//! not depend on evaluation order or on how often a run was resumed.

use std::collections::{HashMap, HashSet};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::token_baseline;
use crate::backend::client::{BackendError, CompletionBackend};
use crate::prune::{self, PruneConfig, Strategy, DEFAULT_SKIP_TOKEN};
use crate::reward::{extract_answer, AnswerComparator};
use crate::segment::{segment, SegmentError, SegmentedTrace};
use crate::trace::{serialize_trace, TraceError, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Answers come from a live completions backend.
    Backend,
    /// Answers come from the exact reader of the synthetic family.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub ratios: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub eval: EvalMode,
    /// Use only the first `samples` traces.
    pub samples: Option<usize>,
    pub seed: u64,
    pub skip_token: String,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            ratios: (1..=10).map(|i| i as f64 / 10.0).collect(),
            strategies: vec![Strategy::LowEntropy, Strategy::HighEntropy, Strategy::Random],
            eval: EvalMode::Synthetic,
            samples: None,
            seed: 0,
            skip_token: DEFAULT_SKIP_TOKEN.to_string(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), SweepError> {
        let bad = |m: String| Err(SweepError::Spec(m));
        if self.ratios.is_empty() {
            return bad("ratios is empty".into());
        }
        if self.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("ratios must lie in [0, 1]".into());
        }
        if self.ratios.windows(2).any(|w| w[0] >= w[1]) {
            return bad("ratios must be strictly ascending".into());
        }
        if self.strategies.is_empty() {
            return bad("strategies is empty".into());
        }
        let unique: HashSet<_> = self.strategies.iter().collect();
        if unique.len() != self.strategies.len() {
            return bad("strategies contain duplicates".into());
        }
        Ok(())
    }
}

/// Parses `START:END:STEP` into an inclusive, ascending grid.
pub fn parse_ratios(s: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [start, end, step] = parts.as_slice() else {
        return Err(format!("expected START:END:STEP, got {s:?}"));
    };
    let parse = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"));
    let (start, end, step) = (parse(start)?, parse(end)?, parse(step)?);
    if !start.is_finite() || !end.is_finite() || !step.is_finite() || step <= 0.0 || start > end {
        return Err(format!("invalid ratio grid {s:?}"));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect())
}

/// What a sweep column evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeriesKind {
    /// Step pruning with the strategy at ratio kappa.
    Step(Strategy),
    /// Lowest-entropy token deletion with removal ratio kappa.
    TokenLowEntropy,
    /// Lowest-entropy step pruning until at least kappa of tokens are removed.
    StepMatched,
}

impl SeriesKind {
    pub fn name(self) -> String {
        match self {
            SeriesKind::Step(s) => s.as_str().to_string(),
            SeriesKind::TokenLowEntropy => "token-low-entropy".into(),
            SeriesKind::StepMatched => "step-matched".into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error("invalid sweep spec: {0}")]
    Spec(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("trace {id}: {source}")]
    Segment { id: String, source: SegmentError },
    #[error("backend failed after {completed} trace(s) were checkpointed: {source}")]
    Backend { completed: usize, source: BackendError },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
}

/// One cell for one trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub correct: bool,
    pub kept_think_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceOutcome {
    pub think_tokens: usize,
    /// Indexed `[series][ratio]`.
    pub cells: Vec<Vec<CellOutcome>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointLine {
    config_hash: String,
    trace_id: String,
    result: TraceOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub series: String,
    pub kappa: f64,
    pub accuracy: f64,
    pub correct: usize,
    pub kept_think_tokens: usize,
    pub original_think_tokens: usize,
    pub token_usage_ratio: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub input_digest: String,
    pub backend: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub provenance: Provenance,
}

impl SweepReport {
    pub fn row(&self, series: &str, kappa: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.series == series && (r.kappa - kappa).abs() < 1e-9)
    }
}

/// Run-level options that are not part of the experiment itself.
pub struct SweepRun<'a> {
    pub config_hash: String,
    pub checkpoint: Option<PathBuf>,
    pub comparator: &'a dyn AnswerComparator,
    /// Traces evaluated between checkpoint flushes.
    pub chunk: usize,
}

fn checkpoint_err(path: &Path, e: impl std::fmt::Display) -> SweepError {
    SweepError::Checkpoint { path: path.to_path_buf(), detail: e.to_string() }
}

/// Loads finished outcomes for `config_hash` and drops a torn final line so
/// that appends start on a fresh line.
fn load_checkpoint(path: &Path, config_hash: &str) -> Result<HashMap<String, TraceOutcome>, SweepError> {
    let mut done = HashMap::new();
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(done),
        Err(e) => return Err(checkpoint_err(path, e)),
    };
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if complete < bytes.len() {
        log::warn!("checkpoint {}: dropping torn final line", path.display());
        let f = OpenOptions::new().write(true).open(path).map_err(|e| checkpoint_err(path, e))?;
        f.set_len(complete as u64).map_err(|e| checkpoint_err(path, e))?;
    }
    let mut skipped = 0usize;
    for line in BufReader::new(&bytes[..complete]).lines() {
        let line = line.map_err(|e| checkpoint_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CheckpointLine>(&line) {
            Ok(rec) if rec.config_hash == config_hash => {
                done.insert(rec.trace_id, rec.result);
            }
            Ok(_) => skipped += 1,
            Err(e) => return Err(checkpoint_err(path, format!("malformed record: {e}"))),
        }
    }
    if skipped > 0 {
        log::warn!("checkpoint {}: ignored {skipped} record(s) from a different config", path.display());
    }
    Ok(done)
}

fn evaluate_cell(
    seg: &SegmentedTrace,
    kind: SeriesKind,
    kappa: f64,
    spec: &SweepSpec,
    backend: &dyn CompletionBackend,
    comparator: &dyn AnswerComparator,
) -> Result<CellOutcome, BackendError> {
    let (prompt, kept) = match kind {
        SeriesKind::Step(strategy) => {
            let config = PruneConfig {
                kappa,
                strategy,
                seed: spec.seed,
                skip_token: spec.skip_token.clone(),
                collapse_skips: false,
            };
            let (_, cot) = prune::prune_trace(seg, &config).expect("kappa validated");
            (cot.inference_prompt.clone(), prune::compressed_think_tokens(seg, &cot))
        }
        SeriesKind::TokenLowEntropy => {
            let masked = token_baseline::mask_tokens(seg, kappa);
            (prune::build_prompt(&seg.source.problem, &masked.think), masked.kept_tokens)
        }
        SeriesKind::StepMatched => {
            let cot = token_baseline::matched_step_prune(seg, kappa, &spec.skip_token);
            (cot.inference_prompt.clone(), prune::compressed_think_tokens(seg, &cot))
        }
    };
    let completion = backend.complete(&prompt)?;
    let truth = seg.source.ground_truth.as_deref().unwrap_or_default();
    let correct = extract_answer(&completion).is_some_and(|a| comparator.matches(&a, truth));
    Ok(CellOutcome { correct, kept_think_tokens: kept })
}

fn evaluate_trace(
    seg: &SegmentedTrace,
    series: &[SeriesKind],
    spec: &SweepSpec,
    backend: &dyn CompletionBackend,
    comparator: &dyn AnswerComparator,
) -> Result<TraceOutcome, BackendError> {
    let cells = series
        .iter()
        .map(|&kind| {
            spec.ratios
                .iter()
                .map(|&kappa| evaluate_cell(seg, kind, kappa, spec, backend, comparator))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TraceOutcome { think_tokens: seg.think_token_count(), cells })
}

#[derive(Default, Clone)]
struct Cell {
    correct: usize,
    kept: usize,
}

/// Evaluates `series` over the traces. Strategies listed in `spec` are
/// ignored here; [`sweep`] maps them onto step series.
pub fn run_series<E>(
    traces: impl IntoIterator<Item = Result<TraceRecord, E>>,
    series: &[SeriesKind],
    spec: &SweepSpec,
    backend: &dyn CompletionBackend,
    run: &SweepRun<'_>,
) -> Result<SweepReport, SweepError>
where
    SweepError: From<E>,
{
    spec.validate()?;
    let mut done = match &run.checkpoint {
        Some(path) => load_checkpoint(path, &run.config_hash)?,
        None => HashMap::new(),
    };
    let mut writer = match &run.checkpoint {
        Some(path) => Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| checkpoint_err(path, e))?,
        ),
        None => None,
    };

    let mut digest = Sha256::new();
    let mut seen = HashSet::new();
    let mut totals = vec![vec![Cell::default(); spec.ratios.len()]; series.len()];
    let mut think_total = 0usize;
    let mut n = 0usize;
    let limit = spec.samples.unwrap_or(usize::MAX);
    let mut iter = traces.into_iter().take(limit);
    let chunk_size = run.chunk.max(1);
    loop {
        let mut chunk = Vec::with_capacity(chunk_size);
        for item in iter.by_ref().take(chunk_size) {
            let trace = item?;
            if trace.ground_truth.is_none() {
                return Err(SweepError::Input(format!("trace {} has no ground_truth", trace.id)));
            }
            if !seen.insert(trace.id.clone()) {
                return Err(SweepError::Input(format!("duplicate trace id {}", trace.id)));
            }
            digest.update(serialize_trace(&trace).as_bytes());
            digest.update(b"\n");
            chunk.push(trace);
        }
        if chunk.is_empty() {
            break;
        }
        let results: Vec<Result<(TraceOutcome, bool), SweepError>> = chunk
            .par_iter()
            .map(|trace| {
                if let Some(outcome) = done.get(&trace.id) {
                    return Ok((outcome.clone(), false));
                }
                let seg = segment(trace).map_err(|source| SweepError::Segment { id: trace.id.clone(), source })?;
                evaluate_trace(&seg, series, spec, backend, run.comparator)
                    .map(|o| (o, true))
                    .map_err(|source| SweepError::Backend { completed: 0, source })
            })
            .collect();

        let mut first_error = None;
        for (trace, result) in chunk.iter().zip(results) {
            match result {
                Ok((outcome, fresh)) => {
                    if outcome.cells.len() != series.len()
                        || outcome.cells.iter().any(|c| c.len() != spec.ratios.len())
                    {
                        return Err(SweepError::Input(format!("checkpointed result for {} has the wrong shape", trace.id)));
                    }
                    if fresh {
                        if let (Some(w), Some(path)) = (writer.as_mut(), &run.checkpoint) {
                            let line = CheckpointLine {
                                config_hash: run.config_hash.clone(),
                                trace_id: trace.id.clone(),
                                result: outcome.clone(),
                            };
                            let text = serde_json::to_string(&line).expect("checkpoint line serializes");
                            writeln!(w, "{text}").map_err(|e| checkpoint_err(path, e))?;
                        }
                        done.insert(trace.id.clone(), outcome.clone());
                    }
                    n += 1;
                    think_total += outcome.think_tokens;
                    for (s, row) in outcome.cells.iter().enumerate() {
                        for (r, cell) in row.iter().enumerate() {
                            totals[s][r].correct += cell.correct as usize;
                            totals[s][r].kept += cell.kept_think_tokens;
                        }
                    }
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        if let (Some(w), Some(path)) = (writer.as_mut(), &run.checkpoint) {
            w.flush().map_err(|e| checkpoint_err(path, e))?;
        }
        if let Some(e) = first_error {
            return Err(match e {
                SweepError::Backend { source, .. } => SweepError::Backend { completed: done.len(), source },
                other => other,
            });
        }
    }

    let mut rows = Vec::new();
    if n > 0 {
        for (s, kind) in series.iter().enumerate() {
            for (r, &kappa) in spec.ratios.iter().enumerate() {
                let cell = &totals[s][r];
                rows.push(SweepRow {
                    series: kind.name(),
                    kappa,
                    accuracy: cell.correct as f64 / n as f64,
                    correct: cell.correct,
                    kept_think_tokens: cell.kept,
                    original_think_tokens: think_total,
                    token_usage_ratio: if think_total == 0 { 0.0 } else { cell.kept as f64 / think_total as f64 },
                    n_samples: n,
                });
            }
        }
    }
    Ok(SweepReport {
        rows,
        provenance: Provenance {
            config_hash: run.config_hash.clone(),
            seed: spec.seed,
            input_digest: hex::encode(digest.finalize()),
            backend: backend.identity(),
        },
    })
}

/// Strategy sweep over `spec.ratios`.
pub fn sweep<E>(
    traces: impl IntoIterator<Item = Result<TraceRecord, E>>,
    spec: &SweepSpec,
    backend: &dyn CompletionBackend,
    run: &SweepRun<'_>,
) -> Result<SweepReport, SweepError>
where
    SweepError: From<E>,
{
    let series: Vec<SeriesKind> = spec.strategies.iter().map(|&s| SeriesKind::Step(s)).collect();
    run_series(traces, &series, spec, backend, run)
}

impl From<std::convert::Infallible> for SweepError {
    fn from(e: std::convert::Infallible) -> Self {
        match e {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_grid() {
        assert_eq!(parse_ratios("0.1:1.0:0.1").unwrap(), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]);
        assert_eq!(parse_ratios("0:1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_ratios("0.3:0.3:0.1").unwrap(), vec![0.3]);
        assert!(parse_ratios("0:1").is_err());
        assert!(parse_ratios("1:0:0.1").is_err());
        assert!(parse_ratios("0:1:0").is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(SweepSpec::default().validate().is_ok());
        let bad = SweepSpec { ratios: vec![0.5, 0.2], ..SweepSpec::default() };
        assert!(bad.validate().is_err());
        let dup = SweepSpec { strategies: vec![Strategy::Random, Strategy::Random], ..SweepSpec::default() };
        assert!(dup.validate().is_err());
        let out = SweepSpec { ratios: vec![1.5], ..SweepSpec::default() };
        assert!(out.validate().is_err());
    }
}
