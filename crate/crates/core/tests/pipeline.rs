use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use eog_core::llm::{CallKey, ChatProvider, ChatRequest, ProviderError, ProviderReply, ScriptedStub};
use eog_core::pipeline::{load_dataset, Pipeline, PipelineError, RunConfig, Stage};

fn mini() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/mini")
}

struct Counting {
    inner: ScriptedStub,
    calls: AtomicUsize,
}

impl ChatProvider for Counting {
    fn id(&self) -> &str {
        "counting"
    }

    fn send(&self, request: &ChatRequest, key: &CallKey) -> Result<ProviderReply, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.send(request, key)
    }
}

fn three(dir: &Path, resume: bool) -> (Pipeline, Arc<Counting>) {
    let mut cfg = RunConfig::load(&mini().join("config.json")).unwrap();
    cfg.resume = resume;
    let mut ds = load_dataset(&mini().join("dataset.jsonl")).unwrap();
    ds.truncate(3);
    let provider =
        Arc::new(Counting { inner: ScriptedStub::load(&mini().join("stub.json")).unwrap(), calls: 0.into() });
    let p = Pipeline::new(cfg, ds, dir).unwrap().with_provider(provider.clone());
    (p, provider)
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn prune_writes_one_row_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let (p, calls) = three(dir.path(), false);
    p.run_stage(Stage::Parsed).unwrap();
    let a = p.run_stage(Stage::Pruned).unwrap();
    assert_eq!((a.records, a.errors), (3, 0));
    assert_eq!(lines(&p.artifact_path(Stage::Pruned)), 3);
    assert_eq!(calls.calls.load(Ordering::SeqCst), 3);
}

#[test]
fn resume_reprocesses_only_missing_markers() {
    let dir = tempfile::tempdir().unwrap();
    let (p, _) = three(dir.path(), false);
    p.run_stage(Stage::Parsed).unwrap();
    let before = std::fs::read(p.artifact_path(Stage::Parsed)).unwrap();

    let markers = dir.path().join("markers").join("parsed");
    let victim = std::fs::read_dir(&markers).unwrap().next().unwrap().unwrap().path();
    std::fs::remove_file(victim).unwrap();

    let (p, calls) = three(dir.path(), true);
    let a = p.run_stage(Stage::Parsed).unwrap();
    assert_eq!(calls.calls.load(Ordering::SeqCst), 1);
    assert_eq!(a.records, 3);
    assert_eq!(std::fs::read(p.artifact_path(Stage::Parsed)).unwrap(), before);
    // The ledger keeps what was spent, including the repeated call.
    assert_eq!(p.ledger().totals.calls, 4);
}

#[test]
fn stage_without_upstream_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let (p, _) = three(dir.path(), false);
    let err = p.run_stage(Stage::Pruned).unwrap_err();
    assert!(matches!(err, PipelineError::MissingUpstream { upstream: Stage::Parsed, .. }));
    assert!(err.to_string().contains("requires parsed"));
}

#[test]
fn full_run_counts_four_calls_per_question() {
    let dir = tempfile::tempdir().unwrap();
    let (p, calls) = three(dir.path(), false);
    let summary = p.run_all().unwrap();
    assert_eq!(summary.report.n, 3);
    assert_eq!(summary.ledger.totals.calls, 12);
    assert_eq!(calls.calls.load(Ordering::SeqCst), 12);
    assert_eq!(p.read_report().unwrap(), summary.report);
}
