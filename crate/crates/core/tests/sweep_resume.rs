use std::convert::Infallible;

use stepprune_core::backend::{BackendError, CompletionBackend};
use stepprune_core::experiment::sweep::{sweep, SweepError, SweepReport, SweepRun, SweepSpec};
use stepprune_core::experiment::tasks::{FamilyParams, SyntheticFamily, SyntheticReader};
use stepprune_core::reward::NormalizedComparator;
use stepprune_core::trace::TraceRecord;

fn family() -> SyntheticFamily {
    SyntheticFamily::new(FamilyParams { n_tasks: 40, ..FamilyParams::default() }).unwrap()
}

fn spec() -> SweepSpec {
    SweepSpec { ratios: vec![0.0, 0.4, 0.8], seed: 9, ..SweepSpec::default() }
}

fn traces(f: &SyntheticFamily) -> impl Iterator<Item = Result<TraceRecord, Infallible>> + '_ {
    f.traces().map(Ok)
}

fn run(f: &SyntheticFamily, backend: &dyn CompletionBackend, hash: &str, ckpt: &std::path::Path) -> Result<SweepReport, SweepError> {
    let run = SweepRun {
        config_hash: hash.into(),
        checkpoint: Some(ckpt.to_path_buf()),
        comparator: &NormalizedComparator,
        chunk: 8,
    };
    sweep(traces(f), &spec(), backend, &run)
}

/// Reader that fails once a budget of answers is spent.
struct Flaky {
    inner: SyntheticReader,
    budget: std::sync::atomic::AtomicIsize,
}

impl CompletionBackend for Flaky {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        if self.budget.fetch_sub(1, std::sync::atomic::Ordering::SeqCst) <= 0 {
            return Err(BackendError::Transport { attempts: 1, detail: "down".into() });
        }
        self.inner.complete(prompt)
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }
}

#[test]
fn resumed_sweep_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let f = family();
    let reader = SyntheticReader::new(f.clone());
    let full = run(&f, &reader, "h1", &dir.path().join("full.ckpt")).unwrap();

    let ckpt = dir.path().join("partial.ckpt");
    // 3 strategies x 3 ratios per trace; the budget runs out in the second
    // chunk, whose finished traces are still checkpointed
    let flaky = Flaky { inner: reader.clone(), budget: (9 * 12 + 4).into() };
    match run(&f, &flaky, "h1", &ckpt) {
        Err(SweepError::Backend { completed, .. }) => assert!((8..=12).contains(&completed), "{completed}"),
        other => panic!("expected a backend failure, got {other:?}"),
    }
    let resumed = run(&f, &reader, "h1", &ckpt).unwrap();
    assert_eq!(serde_json::to_string(&resumed).unwrap(), serde_json::to_string(&full).unwrap());
}

#[test]
fn checkpoint_from_another_config_is_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let f = family();
    let ckpt = dir.path().join("c.ckpt");
    let reader = SyntheticReader::new(f.clone());
    run(&f, &reader, "old", &ckpt).unwrap();
    let before = std::fs::read_to_string(&ckpt).unwrap().lines().count();
    let flaky = Flaky { inner: reader, budget: 0.into() };
    assert!(matches!(run(&f, &flaky, "new", &ckpt), Err(SweepError::Backend { completed: 0, .. })));
    assert_eq!(std::fs::read_to_string(&ckpt).unwrap().lines().count(), before);
}

#[test]
fn torn_checkpoint_line_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let f = family();
    let reader = SyntheticReader::new(f.clone());
    let ckpt = dir.path().join("t.ckpt");
    let full = run(&f, &reader, "h", &ckpt).unwrap();
    let text = std::fs::read_to_string(&ckpt).unwrap();
    let keep: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
    let torn = &text.lines().nth(10).unwrap()[..20];
    std::fs::write(&ckpt, format!("{keep}{torn}")).unwrap();
    let resumed = run(&f, &reader, "h", &ckpt).unwrap();
    assert_eq!(resumed, full);
    assert_eq!(std::fs::read_to_string(&ckpt).unwrap().lines().count(), 40);
}
