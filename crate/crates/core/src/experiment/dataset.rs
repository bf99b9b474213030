//! Compressed dataset building with a token-length filter.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::prune::{self, CompressedRecord, PruneConfig};
use crate::segment::segment;
use crate::trace::{TraceError, TraceRecord};

pub const DEFAULT_MAX_TOKENS: usize = 4096;
const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    #[serde(flatten)]
    pub record: CompressedRecord,
    /// Whole-completion token count after compression.
    pub compressed_tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub input: usize,
    pub emitted: usize,
    /// Over the token limit.
    pub filtered: usize,
    /// Unparseable or unsegmentable.
    pub rejected: usize,
    /// Mean over emitted records.
    pub mean_token_reduction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Emit(DatasetRecord),
    Filtered { id: String, compressed_tokens: usize },
    Rejected { id: Option<String>, reason: String },
}

/// Compresses one trace and applies the limit; a count equal to
/// `max_tokens` is kept.
pub fn process_trace(trace: &TraceRecord, config: &PruneConfig, max_tokens: usize) -> Outcome {
    let seg = match segment(trace) {
        Ok(s) => s,
        Err(e) => return Outcome::Rejected { id: Some(trace.id.clone()), reason: e.to_string() },
    };
    let (_, cot) = match prune::prune_trace(&seg, config) {
        Ok(x) => x,
        Err(e) => return Outcome::Rejected { id: Some(trace.id.clone()), reason: e.to_string() },
    };
    let compressed_tokens = prune::compressed_total_tokens(&seg, &cot);
    if compressed_tokens > max_tokens {
        return Outcome::Filtered { id: trace.id.clone(), compressed_tokens };
    }
    Outcome::Emit(DatasetRecord { record: CompressedRecord::new(&seg, &cot), compressed_tokens })
}

/// Streams traces through compression and filtering, calling `emit` for each
/// kept record in input order.
pub fn build_dataset<E>(
    traces: impl IntoIterator<Item = Result<TraceRecord, TraceError>>,
    config: &PruneConfig,
    max_tokens: usize,
    mut emit: impl FnMut(&DatasetRecord) -> Result<(), E>,
) -> Result<DatasetStats, E> {
    let mut stats = DatasetStats::default();
    let mut reduction_sum = 0.0;
    let mut iter = traces.into_iter();
    loop {
        let chunk: Vec<_> = iter.by_ref().take(CHUNK).collect();
        if chunk.is_empty() {
            break;
        }
        let outcomes: Vec<Outcome> = chunk
            .par_iter()
            .map(|item| match item {
                Ok(trace) => process_trace(trace, config, max_tokens),
                Err(e) => Outcome::Rejected { id: None, reason: e.to_string() },
            })
            .collect();
        for outcome in outcomes {
            stats.input += 1;
            match outcome {
                Outcome::Emit(record) => {
                    stats.emitted += 1;
                    reduction_sum += record.record.token_reduction;
                    emit(&record)?;
                }
                Outcome::Filtered { id, compressed_tokens } => {
                    stats.filtered += 1;
                    log::debug!("filtered {id}: {compressed_tokens} tokens > {max_tokens}");
                }
                Outcome::Rejected { id, reason } => {
                    stats.rejected += 1;
                    log::warn!("rejected {}: {reason}", id.as_deref().unwrap_or("<unparsed>"));
                }
            }
        }
    }
    if stats.emitted > 0 {
        stats.mean_token_reduction = reduction_sum / stats.emitted as f64;
    }
    Ok(stats)
}
