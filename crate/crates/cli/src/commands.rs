use std::path::PathBuf;

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};
use stepprune_core::backend::client::TraceRequest;
use stepprune_core::backend::{BackendError, CompletionBackend, CompletionClient};
use stepprune_core::entropy::{self, EntropyMode};
use stepprune_core::experiment::dataset::build_dataset as build;
use stepprune_core::experiment::mi::mi_oracle as oracle;
use stepprune_core::experiment::report::{render, ReportFormat};
use stepprune_core::experiment::sweep::{self as sweeps, EvalMode, SweepError, SweepReport, SweepRun};
use stepprune_core::experiment::tasks::{SyntheticFamily, SyntheticReader};
use stepprune_core::experiment::token_baseline::token_prune_baseline;
use stepprune_core::prune::{prune_trace, CompressedRecord};
use stepprune_core::reward::{score, NormalizedComparator, RewardLine};
use stepprune_core::segment::segment;
use stepprune_core::trace::{parse_trace_line, TraceRecord};

use crate::io::{read_all, Lines, Sink};
use crate::{CliConfig, CliError, Common};

const CHUNK: usize = 256;

pub struct Context {
    pub config: CliConfig,
    pub flags: Common,
    pub hash: String,
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

impl Context {
    fn family(&self) -> Result<SyntheticFamily, CliError> {
        SyntheticFamily::new(self.config.family.clone()).map_err(|e| invalid(format!("family: {e}")))
    }

    /// `--in`, or the configured synthetic family when it is omitted.
    fn trace_lines(&self) -> Result<Lines, CliError> {
        match &self.flags.input {
            Some(p) => Lines::open(p),
            None => Ok(Lines::family(self.family()?)),
        }
    }

    fn required_input(&self) -> Result<&PathBuf, CliError> {
        self.flags.input.as_ref().ok_or_else(|| invalid("--in is required"))
    }

    fn format(&self, default: ReportFormat) -> ReportFormat {
        self.flags.format.as_deref().map_or(default, |f| f.parse().expect("clap restricts values"))
    }

    fn summary(&self, command: &str, input_digest: Option<String>, extra: Value) -> Value {
        let mut v = json!({
            "summary": command,
            "config_hash": self.hash,
            "input_digest": input_digest,
        });
        if let (Some(obj), Value::Object(more)) = (v.as_object_mut(), extra) {
            obj.extend(more);
        }
        v
    }
}

fn parse_at(line_no: usize, line: &str) -> Result<TraceRecord, CliError> {
    parse_trace_line(line).map_err(|e| invalid(format!("line {line_no}: {e}")))
}

/// Maps `f` over chunks of lines in parallel and hands results to `emit` in
/// input order.
fn for_chunks<T: Send>(
    lines: &mut Lines,
    f: impl Fn(usize, &str) -> Result<T, CliError> + Sync,
    mut emit: impl FnMut(T) -> Result<(), CliError>,
) -> Result<(), CliError> {
    loop {
        let chunk = lines.by_ref().take(CHUNK).collect::<Result<Vec<_>, _>>()?;
        if chunk.is_empty() {
            return Ok(());
        }
        let results: Vec<_> = chunk.par_iter().map(|(n, l)| f(*n, l)).collect();
        for r in results {
            emit(r?)?;
        }
    }
}

fn backend_error(e: BackendError) -> CliError {
    match e {
        BackendError::Config(m) => CliError::Validation(m),
        other => CliError::Backend(other.to_string()),
    }
}

#[derive(Deserialize)]
struct ProblemLine {
    id: String,
    problem: String,
    #[serde(default)]
    ground_truth: Option<String>,
}

pub fn collect(ctx: &Context) -> Result<(), CliError> {
    let mut lines = Lines::open(ctx.required_input()?)?;
    let client = CompletionClient::new(ctx.config.effective_backend()).map_err(backend_error)?;
    let mut sink = Sink::new(ctx.flags.out.as_deref())?;
    let batch = client.config().max_in_flight * 4;
    let (mut collected, mut truncated) = (0usize, 0usize);
    loop {
        let mut requests = Vec::with_capacity(batch);
        for item in lines.by_ref().take(batch) {
            let (n, line) = item?;
            let p: ProblemLine = serde_json::from_str(&line).map_err(|e| invalid(format!("line {n}: {e}")))?;
            requests.push(TraceRequest { id: p.id, problem: p.problem, ground_truth: p.ground_truth });
        }
        if requests.is_empty() {
            break;
        }
        for result in client.fetch_many(&requests) {
            let trace = match result {
                Ok(t) => t,
                Err(BackendError::Truncation(t)) => {
                    log::warn!("trace {} has no closing think tag; kept and flagged", t.id);
                    truncated += 1;
                    *t
                }
                Err(e) => return Err(backend_error(e)),
            };
            sink.line(&stepprune_core::trace::serialize_trace(&trace))?;
            collected += 1;
        }
    }
    let summary = ctx.summary("collect", Some(lines.digest()), json!({"records": collected, "truncated": truncated}));
    sink.finish(&summary)
}

fn mode_name(mode: EntropyMode) -> &'static str {
    match mode {
        EntropyMode::Exact => "exact",
        EntropyMode::TopKLowerBound => "top_k_lower_bound",
    }
}

pub fn inspect(ctx: &Context) -> Result<(), CliError> {
    let format = ctx.format(ReportFormat::Table);
    if format == ReportFormat::Plotdata {
        return Err(invalid("inspect supports --format table or csv"));
    }
    let mut lines = ctx.trace_lines()?;
    let mut sink = Sink::new(ctx.flags.out.as_deref())?;
    match format {
        ReportFormat::Csv => sink.line("id,index,tokens,entropy_bits,mode")?,
        _ => sink.line(&format!("{:<24} {:>6} {:>7} {:>14} {}", "id", "index", "tokens", "entropy_bits", "mode"))?,
    }
    let (mut traces, mut steps) = (0usize, 0usize);
    for_chunks(
        &mut lines,
        |n, line| {
            let trace = parse_at(n, line)?;
            let seg = segment(&trace).map_err(|e| invalid(format!("line {n}: {e}")))?;
            let report = entropy::analyze(&seg).map_err(|e| invalid(format!("line {n}: {e}")))?;
            Ok((trace.id, report))
        },
        |(id, report)| {
            traces += 1;
            let mode = mode_name(report.mode);
            for (i, (bits, len)) in report.per_step_bits.iter().zip(&report.step_lengths).enumerate() {
                steps += 1;
                match format {
                    ReportFormat::Csv => sink.line(&format!("{id},{i},{len},{bits:.9},{mode}"))?,
                    _ => sink.line(&format!("{id:<24} {i:>6} {len:>7} {bits:>14.6} {mode}"))?,
                }
            }
            Ok(())
        },
    )?;
    let summary = ctx.summary("inspect", Some(lines.digest()), json!({"traces": traces, "steps": steps}));
    sink.finish(&summary)
}

pub fn prune(ctx: &Context) -> Result<(), CliError> {
    let mut lines = ctx.trace_lines()?;
    let mut sink = Sink::new(ctx.flags.out.as_deref())?;
    let config = &ctx.config.prune;
    let (mut records, mut reduction) = (0usize, 0.0f64);
    for_chunks(
        &mut lines,
        |n, line| {
            let trace = parse_at(n, line)?;
            let seg = segment(&trace).map_err(|e| invalid(format!("line {n}: {e}")))?;
            let (_, cot) = prune_trace(&seg, config).map_err(|e| invalid(format!("line {n}: {e}")))?;
            Ok(CompressedRecord::new(&seg, &cot))
        },
        |record| {
            records += 1;
            reduction += record.token_reduction;
            sink.json(&record)
        },
    )?;
    let mean = if records > 0 { reduction / records as f64 } else { 0.0 };
    let extra = json!({
        "records": records,
        "kappa": config.kappa,
        "strategy": config.strategy,
        "mean_token_reduction": mean,
    });
    sink.finish(&ctx.summary("prune", Some(lines.digest()), extra))
}

#[derive(Deserialize)]
struct RewardInput {
    id: String,
    completion: String,
    ground_truth: String,
    #[serde(default)]
    token_count: Option<usize>,
}

/// Accepts trace records or `{"id","completion","ground_truth","token_count"?}`.
fn reward_input(n: usize, line: &str) -> Result<RewardInput, CliError> {
    let value: Value = serde_json::from_str(line).map_err(|e| invalid(format!("line {n}: {e}")))?;
    if value.get("raw_completion").is_some() {
        let trace = parse_at(n, line)?;
        let ground_truth =
            trace.ground_truth.ok_or_else(|| invalid(format!("line {n}: trace {} has no ground_truth", trace.id)))?;
        return Ok(RewardInput {
            id: trace.id,
            completion: trace.raw_completion,
            ground_truth,
            token_count: Some(trace.tokens.len()),
        });
    }
    serde_json::from_value(value).map_err(|e| invalid(format!("line {n}: {e}")))
}

pub fn reward(ctx: &Context) -> Result<(), CliError> {
    let mut lines = Lines::open(ctx.required_input()?)?;
    let mut sink = Sink::new(ctx.flags.out.as_deref())?;
    let config = &ctx.config.reward;
    let (mut records, mut total) = (0usize, 0.0f64);
    for_chunks(
        &mut lines,
        |n, line| {
            let input = reward_input(n, line)?;
            let b = score(&input.completion, &input.ground_truth, input.token_count, config, &NormalizedComparator);
            Ok(RewardLine::new(input.id, &b))
        },
        |line| {
            records += 1;
            total += line.total;
            sink.json(&line)
        },
    )?;
    let mean = if records > 0 { total / records as f64 } else { 0.0 };
    sink.finish(&ctx.summary("reward", Some(lines.digest()), json!({"records": records, "mean_total": mean})))
}

pub fn sweep(ctx: &Context, token_baseline: bool) -> Result<(), CliError> {
    let spec = &ctx.config.sweep;
    let lines = ctx.trace_lines()?;
    let traces = lines.map(|item| {
        let (n, line) = item.map_err(|e| SweepError::Input(e.to_string()))?;
        parse_trace_line(&line).map_err(|e| SweepError::Input(format!("line {n}: {e}")))
    });
    let backend: Box<dyn CompletionBackend> = match spec.eval {
        EvalMode::Synthetic => Box::new(SyntheticReader::new(ctx.family()?)),
        EvalMode::Backend => Box::new(CompletionClient::new(ctx.config.effective_backend()).map_err(backend_error)?),
    };
    let checkpoint = ctx.config.run.checkpoint.clone().or_else(|| {
        ctx.flags.out.as_ref().map(|o| {
            let mut s = o.clone().into_os_string();
            s.push(".ckpt.jsonl");
            PathBuf::from(s)
        })
    });
    let run = SweepRun {
        config_hash: ctx.hash.clone(),
        checkpoint,
        comparator: &NormalizedComparator,
        chunk: ctx.config.run.chunk,
    };
    let result = if token_baseline {
        token_prune_baseline(traces, spec, backend.as_ref(), &run)
    } else {
        sweeps::sweep(traces, spec, backend.as_ref(), &run)
    };
    let report = result.map_err(|e| match e {
        SweepError::Backend { .. } => CliError::Backend(e.to_string()),
        other => invalid(other),
    })?;
    if let Some(out) = &ctx.flags.out {
        let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
        text.push('\n');
        std::fs::write(out, text).map_err(|e| invalid(format!("{}: {e}", out.display())))?;
    }
    print!("{}", render(&report, ctx.format(ReportFormat::Table)));
    Ok(())
}

pub fn build_dataset(ctx: &Context) -> Result<(), CliError> {
    let mut lines = ctx.trace_lines()?;
    let mut sink = Sink::new(ctx.flags.out.as_deref())?;
    let max_tokens = ctx.config.dataset.max_tokens;
    let mut io_error = None;
    let traces = lines.by_ref().map_while(|item| match item {
        Ok((_, line)) => Some(parse_trace_line(&line)),
        Err(e) => {
            io_error = Some(e);
            None
        }
    });
    let stats = build(traces, &ctx.config.prune, max_tokens, |r| sink.json(r))?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let mut extra = serde_json::to_value(&stats).expect("stats serialize");
    extra["max_tokens"] = json!(max_tokens);
    sink.finish(&ctx.summary("build-dataset", Some(lines.digest()), extra))
}

pub fn mi_oracle(ctx: &Context) -> Result<(), CliError> {
    let params = &ctx.config.mi;
    let mut sink = Sink::new(ctx.flags.out.as_deref())?;
    let results: Vec<Result<Value, CliError>> = (0..params.models)
        .into_par_iter()
        .map(|i| {
            let lm = params.model(i).map_err(|e| invalid(format!("model {i}: {e}")))?;
            let n = lm.layout.step_lens.len();
            let subset = params.subset_size_for(n);
            let report = oracle(&lm, params.max_len, subset).map_err(|e| invalid(format!("model {i}: {e}")))?;
            Ok(json!({
                "model": i,
                "steps": n,
                "content_symbols": lm.vocab.len() - 3,
                "order": lm.order,
                "length": lm.layout.len(),
                "subset_size": subset,
                "report": report,
            }))
        })
        .collect();
    let mut violations = 0usize;
    for r in results {
        let v = r?;
        if v["report"]["all_hold"] != json!(true) {
            violations += 1;
        }
        sink.json(&v)?;
    }
    let extra = json!({"models": params.models, "all_hold": violations == 0, "violations": violations});
    sink.finish(&ctx.summary("mi-oracle", None, extra))?;
    if violations > 0 {
        return Err(invalid(format!("bound violated in {violations} model(s)")));
    }
    Ok(())
}

pub fn report(ctx: &Context) -> Result<(), CliError> {
    let text = read_all(ctx.required_input()?)?;
    let report: SweepReport = serde_json::from_str(&text).map_err(|e| invalid(format!("report: {e}")))?;
    let rendered = render(&report, ctx.format(ReportFormat::Table));
    match &ctx.flags.out {
        Some(out) => std::fs::write(out, rendered).map_err(|e| invalid(format!("{}: {e}", out.display()))),
        None => {
            print!("{rendered}");
            Ok(())
        }
    }
}
