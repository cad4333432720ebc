//! Staged batch pipeline: parse, prune, enrich, answer, report.
//!
//! Each stage reads its upstream JSONL artifact from the stage directory,
//! processes every dataset record independently and writes its own artifact
//! sorted by id. Per-record outputs are first written as completion markers
//! under `markers/<stage>/`, so an interrupted stage can resume.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::answering::{build_qa_prompt, parse_final_answers, AnswerSet, QaRecord};
use crate::embedding::{EmbeddingCache, EmbeddingProviderSpec};
use crate::enrichment::{
    associate_queries, build_feature_prompt, entity_contexts, merge_enriched, parse_feature_output,
    parse_structural_output, render_structural_prompt, structural_payload, EnrichWarnings, EnrichedRecord,
    DEFAULT_MAX_QUADRUPLES, DEFAULT_TAU,
};
use crate::evaluation::{
    average_quality, evaluate, export_quality_report, graph_quality, EvalInput, EvalReport, GraphQualityReport,
    KgcScorerSpec, QualityExport, QualityOptions,
};
use crate::kg::{textualize_triple, GroupMode, KnowledgeGraph, Triple};
use crate::llm::{
    cost_report, estimate_tokens, CallKey, ChatProvider, ChatRequest, CostLedger, CostReport, Gateway,
    GenerationParams, LedgerSnapshot, LlmProviderSpec, Prices, RetryPolicy, TemplateName, TemplateSet,
};
use crate::pruning::{
    channel_contributions, channel_mrr, coverage_of, entity_names, prune, score_graph, select_top_k, MaskChannel,
    PrunedGraph, PrunedRecord, RankingMode, ScoredTriple, DEFAULT_TOP_K,
};
use crate::query::{build_quadruples, decompose, ParsedRecord, QueryDecomposition};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("stage {stage} requires {upstream}: {path} not found")]
    MissingUpstream { stage: Stage, upstream: Stage, path: PathBuf },
    #[error("dataset line {line}: {reason}")]
    Dataset { line: usize, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Provider(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    NoEnrich,
    NoPruneNoEnrich,
    NoStructural,
    NoFeature,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::Full, Ablation::NoEnrich, Ablation::NoPruneNoEnrich, Ablation::NoStructural, Ablation::NoFeature];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoEnrich => "no-enrich",
            Ablation::NoPruneNoEnrich => "no-prune-no-enrich",
            Ablation::NoStructural => "no-structural",
            Ablation::NoFeature => "no-feature",
        }
    }

    pub fn decomposes(self) -> bool {
        self != Ablation::NoPruneNoEnrich
    }

    pub fn prunes(self) -> bool {
        self != Ablation::NoPruneNoEnrich
    }

    pub fn structural(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoFeature)
    }

    pub fn feature(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoStructural)
    }

    /// Provider calls issued per question.
    pub fn planned_calls(self) -> u64 {
        u64::from(self.decomposes()) + u64::from(self.structural()) + u64::from(self.feature()) + 1
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| format!("unknown ablation {s:?}"))
    }
}

fn default_k() -> usize {
    DEFAULT_TOP_K
}
fn default_temperature() -> f64 {
    crate::llm::default_temperature()
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_cap() -> usize {
    DEFAULT_MAX_QUADRUPLES
}
fn default_workers() -> usize {
    4
}
fn default_in_flight() -> usize {
    8
}
fn default_prices() -> Prices {
    // gpt-4o-mini list prices, USD per token.
    Prices { input_per_token: 0.15e-6, output_per_token: 0.60e-6 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_cap")]
    pub max_quadruples: usize,
    #[serde(default = "default_prices")]
    pub prices: Prices,
    #[serde(default)]
    pub llm: Option<LlmProviderSpec>,
    #[serde(default)]
    pub embedder: EmbeddingProviderSpec,
    #[serde(default)]
    pub kgc: KgcScorerSpec,
    /// Semantic richness counts only triples scoring at least this much.
    #[serde(default)]
    pub kgc_threshold: Option<f64>,
    #[serde(default)]
    pub redundancy_grouping: GroupMode,
    #[serde(default)]
    pub template_dir: Option<PathBuf>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub min_call_interval_ms: Option<u64>,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub resume: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl RunConfig {
    /// Reads a JSON config. Relative paths inside it resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|source| PipelineError::Json { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(LlmProviderSpec::Stub { path }) = &mut cfg.llm {
            resolve(path);
        }
        if let Some(p) = &mut cfg.template_dir {
            resolve(p);
        }
        if let Some(p) = &mut cfg.cache_dir {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k == 0 {
            return Err(PipelineError::Config("k must be at least 1".into()));
        }
        if !self.tau.is_finite() {
            return Err(PipelineError::Config("tau must be finite".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(PipelineError::Config("temperature must be a non-negative number".into()));
        }
        if self.prices.input_per_token < 0.0 || self.prices.output_per_token < 0.0 {
            return Err(PipelineError::Config("prices must be non-negative".into()));
        }
        if self.workers == 0 || self.max_in_flight == 0 {
            return Err(PipelineError::Config("workers and max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    fn params(&self) -> GenerationParams {
        GenerationParams { temperature: self.temperature, ..GenerationParams::default() }
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default)]
    pub topic_entities: Vec<String>,
    #[serde(default)]
    pub graph: Vec<[String; 3]>,
}

impl DatasetRecord {
    pub fn knowledge_graph(&self) -> Result<KnowledgeGraph, crate::kg::GraphError> {
        crate::kg::load_graph(self.graph.iter().map(|r| r.to_vec()))
    }
}

/// Parses dataset JSONL; ids must be unique and answer lists non-empty.
pub fn parse_dataset(text: &str) -> Result<Vec<DatasetRecord>, PipelineError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord =
            serde_json::from_str(line).map_err(|e| PipelineError::Dataset { line: line_no, reason: e.to_string() })?;
        if rec.answers.is_empty() {
            return Err(PipelineError::Dataset { line: line_no, reason: format!("record {} has no answers", rec.id) });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(PipelineError::Dataset { line: line_no, reason: format!("duplicate id {}", rec.id) });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>, PipelineError> {
    parse_dataset(&fs::read_to_string(path).map_err(io_err(path))?)
}

// ---------------------------------------------------------------------------
// Stages and artifacts
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Parsed,
    Pruned,
    Enriched,
    Answers,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Parsed, Stage::Pruned, Stage::Enriched, Stage::Answers, Stage::Report];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Parsed => "parsed",
            Stage::Pruned => "pruned",
            Stage::Enriched => "enriched",
            Stage::Answers => "answers",
            Stage::Report => "report",
        }
    }

    pub fn upstream(self) -> Option<Stage> {
        match self {
            Stage::Parsed => None,
            Stage::Pruned => Some(Stage::Parsed),
            Stage::Enriched => Some(Stage::Pruned),
            Stage::Answers => Some(Stage::Enriched),
            Stage::Report => Some(Stage::Answers),
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Stage::Parsed => "parsed.jsonl",
            Stage::Pruned => "pruned.jsonl",
            Stage::Enriched => "enriched.jsonl",
            Stage::Answers => "answers.jsonl",
            Stage::Report => "report.json",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|x| x.as_str() == s).ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageArtifact {
    pub stage: Stage,
    pub path: PathBuf,
    pub content_hash: String,
    /// Hash of the upstream artifact this one was computed from.
    pub upstream_hash: Option<String>,
    pub records: usize,
    pub errors: usize,
}

pub const MANIFEST: &str = "manifest.json";
pub const LEDGER: &str = "ledger.json";
pub const RUN_LOG: &str = "run.log";
pub const COST_REPORT: &str = "cost.json";
pub const SWEEP_CSV: &str = "sweep_k.csv";
pub const MRR_JSON: &str = "mrr.json";
pub const QUALITY_JSON: &str = "quality.json";

fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String, PipelineError> {
    Ok(hash_bytes(&fs::read(path).map_err(io_err(path))?))
}

#[derive(Debug, Serialize)]
struct ErrorRow<'a> {
    id: &'a str,
    error: String,
}

/// Outcome of processing one record.
type RecordResult<T> = Result<T, String>;

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

pub struct Pipeline {
    config: RunConfig,
    dataset: Vec<DatasetRecord>,
    dataset_name: String,
    stage_dir: PathBuf,
    provider: Option<Arc<dyn ChatProvider>>,
    cache: EmbeddingCache<f64>,
    templates: TemplateSet,
}

impl Pipeline {
    /// Builds providers from `config`. The LLM provider is built lazily, so
    /// offline stages run without one configured.
    pub fn new(
        config: RunConfig,
        dataset: Vec<DatasetRecord>,
        stage_dir: impl Into<PathBuf>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let provider = match &config.llm {
            Some(spec) => Some(spec.build().map_err(|e| PipelineError::Provider(e.to_string()))?),
            None => None,
        };
        let embedder = config.embedder.build::<f64>().map_err(|e| PipelineError::Provider(e.to_string()))?;
        let templates = match &config.template_dir {
            Some(dir) => TemplateSet::from_dir(dir).map_err(|e| PipelineError::Config(e.to_string()))?,
            None => TemplateSet::builtin(),
        };
        let stage_dir = stage_dir.into();
        fs::create_dir_all(&stage_dir).map_err(io_err(&stage_dir))?;
        Ok(Self {
            config,
            dataset,
            dataset_name: "dataset".into(),
            stage_dir,
            provider,
            cache: EmbeddingCache::new(embedder),
            templates,
        })
    }

    pub fn with_provider(mut self, provider: Arc<dyn ChatProvider>) -> Self {
        self.provider = Some(provider);
        self
    }

    pub fn with_dataset_name(mut self, name: impl Into<String>) -> Self {
        self.dataset_name = name.into();
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn stage_dir(&self) -> &Path {
        &self.stage_dir
    }

    pub fn dataset(&self) -> &[DatasetRecord] {
        &self.dataset
    }

    pub fn cache(&self) -> &EmbeddingCache<f64> {
        &self.cache
    }

    pub fn artifact_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir.join(stage.file_name())
    }

    fn marker_dir(&self, stage: Stage) -> PathBuf {
        self.stage_dir.join("markers").join(stage.as_str())
    }

    fn marker_path(&self, stage: Stage, id: &str) -> PathBuf {
        self.marker_dir(stage).join(format!("{}.json", hex::encode(id)))
    }

    fn stage_ledger_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir.join(format!("ledger.{stage}.json"))
    }

    fn errors_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir.join(format!("{stage}.errors.jsonl"))
    }

    fn embedding_cache_path(&self) -> Option<PathBuf> {
        self.config.cache_dir.as_ref().map(|d| d.join("embeddings.json"))
    }

    fn log_event(&self, message: &str) {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let path = self.stage_dir.join(RUN_LOG);
        let res = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| writeln!(f, "{secs:.3} {message}"));
        if let Err(e) = res {
            log::warn!("cannot append to {}: {e}", path.display());
        }
        log::info!("{message}");
    }

    pub fn read_manifest(&self) -> BTreeMap<Stage, StageArtifact> {
        fs::read(self.stage_dir.join(MANIFEST)).ok().and_then(|b| serde_json::from_slice(&b).ok()).unwrap_or_default()
    }

    fn write_manifest_entry(&self, artifact: &StageArtifact) -> Result<(), PipelineError> {
        let mut manifest = self.read_manifest();
        manifest.insert(artifact.stage, artifact.clone());
        write_json(&self.stage_dir.join(MANIFEST), &manifest)
    }

    /// Combined ledger over every stage that has run.
    pub fn ledger(&self) -> LedgerSnapshot {
        let ledger = CostLedger::new();
        for stage in Stage::ALL {
            if let Ok(bytes) = fs::read(self.stage_ledger_path(stage)) {
                if let Ok(snap) = serde_json::from_slice::<LedgerSnapshot>(&bytes) {
                    for (id, e) in &snap.per_question {
                        ledger.record(id, *e);
                    }
                }
            }
        }
        ledger.snapshot()
    }

    fn gateway(&self, ledger: Arc<CostLedger>) -> Result<Gateway, PipelineError> {
        let provider = self
            .provider
            .clone()
            .ok_or_else(|| PipelineError::Config("this stage needs an llm provider in the config".into()))?;
        Ok(Gateway::new(provider)
            .with_retry(self.config.retry)
            .with_ledger(ledger)
            .with_max_in_flight(self.config.max_in_flight)
            .with_min_interval(self.config.min_call_interval_ms.map(Duration::from_millis)))
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool, PipelineError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    fn read_upstream<T: DeserializeOwned>(
        &self,
        stage: Stage,
        upstream: Stage,
    ) -> Result<UpstreamRows<T>, PipelineError> {
        let path = self.artifact_path(upstream);
        if !path.exists() {
            return Err(PipelineError::MissingUpstream { stage, upstream, path });
        }
        read_jsonl_rows(&path)
    }

    /// Runs one stage over the whole dataset.
    pub fn run_stage(&self, stage: Stage) -> Result<StageArtifact, PipelineError> {
        let started = Instant::now();
        self.log_event(&format!("stage {stage} start ablation={}", self.config.ablation));
        if let Some(path) = self.embedding_cache_path() {
            if let Err(e) = self.preload_embeddings(&path) {
                log::warn!("embedding cache not loaded: {e}");
            }
        }
        let artifact = match stage {
            Stage::Parsed => self.run_records(stage, None, |rec, gw, _| self.parse_record(rec, gw)),
            Stage::Pruned => {
                let parsed = self.read_upstream::<ParsedRecord>(stage, Stage::Parsed)?;
                self.run_records(stage, Some(&parsed.hash), |rec, _, _| self.prune_record(rec, &parsed))
            }
            Stage::Enriched => {
                let pruned = self.read_upstream::<PrunedRecord>(stage, Stage::Pruned)?;
                let parsed = self.read_upstream::<ParsedRecord>(stage, Stage::Parsed)?;
                self.run_records(stage, Some(&pruned.hash), |rec, gw, _| self.enrich_record(rec, gw, &parsed, &pruned))
            }
            Stage::Answers => {
                let enriched = self.read_upstream::<EnrichedRecord>(stage, Stage::Enriched)?;
                let pruned = self.read_upstream::<PrunedRecord>(stage, Stage::Pruned)?;
                self.run_records(stage, Some(&enriched.hash), |rec, gw, _| {
                    self.answer_record(rec, gw, &pruned, &enriched)
                })
            }
            Stage::Report => self.run_report(),
        }?;
        if let Some(path) = self.embedding_cache_path() {
            if let Some(dir) = path.parent() {
                let _ = fs::create_dir_all(dir);
            }
            if let Err(e) = self.cache.save(&path) {
                log::warn!("embedding cache not saved: {e}");
            }
        }
        self.write_manifest_entry(&artifact)?;
        write_json(&self.stage_dir.join(LEDGER), &self.ledger())?;
        self.log_event(&format!(
            "stage {stage} done records={} errors={} elapsed_ms={}",
            artifact.records,
            artifact.errors,
            started.elapsed().as_millis()
        ));
        Ok(artifact)
    }

    fn preload_embeddings(&self, path: &Path) -> Result<usize, crate::embedding::EmbeddingError> {
        let mut texts: Vec<String> = Vec::new();
        for rec in &self.dataset {
            texts.push(rec.question.clone());
        }
        self.cache.preload(path, &texts)
    }

    /// Shared per-record driver: resume, parallel processing, markers,
    /// error isolation, sorted output and ledger persistence.
    fn run_records<T, P>(
        &self,
        stage: Stage,
        upstream_hash: Option<&str>,
        process: P,
    ) -> Result<StageArtifact, PipelineError>
    where
        T: Serialize + DeserializeOwned + Send,
        P: Fn(&DatasetRecord, Option<&Gateway>, Stage) -> RecordResult<T> + Sync,
    {
        let marker_dir = self.marker_dir(stage);
        let manifest = self.read_manifest();
        let upstream_changed = manifest.get(&stage).is_some_and(|a| a.upstream_hash.as_deref() != upstream_hash);
        let resume = self.config.resume && !upstream_changed;
        if self.config.resume && upstream_changed {
            log::warn!("{stage}: upstream artifact changed since the last run; recomputing every record");
        }
        let ledger_path = self.stage_ledger_path(stage);
        let ledger = Arc::new(if resume {
            read_json::<LedgerSnapshot>(&ledger_path).map(CostLedger::from_snapshot).unwrap_or_default()
        } else {
            CostLedger::new()
        });
        if !resume && marker_dir.exists() {
            fs::remove_dir_all(&marker_dir).map_err(io_err(&marker_dir))?;
        }
        fs::create_dir_all(&marker_dir).map_err(io_err(&marker_dir))?;

        let needs_llm = self.stage_needs_llm(stage);
        let gateway = if needs_llm { Some(self.gateway(Arc::clone(&ledger))?) } else { None };

        let pending: Vec<&DatasetRecord> =
            self.dataset.iter().filter(|r| !self.marker_path(stage, &r.id).exists()).collect();
        log::info!("{stage}: {} of {} records to process", pending.len(), self.dataset.len());

        let pool = self.thread_pool()?;
        let failures: Vec<(String, String)> = pool.install(|| {
            pending
                .par_iter()
                .filter_map(|rec| {
                    let outcome = process(rec, gateway.as_ref(), stage).and_then(|row| {
                        let path = self.marker_path(stage, &rec.id);
                        let body = serde_json::to_vec(&row).map_err(|e| e.to_string())?;
                        write_atomic(&path, &body).map_err(|e| e.to_string())
                    });
                    outcome.err().map(|e| (rec.id.clone(), e))
                })
                .collect()
        });

        let mut failures = failures;
        failures.sort();
        let errors_path = self.errors_path(stage);
        let mut err_body = Vec::new();
        for (id, error) in &failures {
            log::warn!("{stage} {id}: {error}");
            serde_json::to_writer(&mut err_body, &ErrorRow { id, error: error.clone() })
                .map_err(|source| PipelineError::Json { path: errors_path.clone(), source })?;
            err_body.push(b'\n');
        }
        write_atomic(&errors_path, &err_body).map_err(io_err(&errors_path))?;

        let mut ids: Vec<&str> = self.dataset.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        let mut out = Vec::new();
        let mut records = 0;
        for id in ids {
            if let Ok(bytes) = fs::read(self.marker_path(stage, id)) {
                out.extend_from_slice(&bytes);
                out.push(b'\n');
                records += 1;
            }
        }
        let path = self.artifact_path(stage);
        write_atomic(&path, &out).map_err(io_err(&path))?;
        write_json(&ledger_path, &ledger.snapshot())?;
        Ok(StageArtifact {
            stage,
            content_hash: hash_bytes(&out),
            path,
            upstream_hash: upstream_hash.map(str::to_string),
            records,
            errors: failures.len(),
        })
    }

    fn stage_needs_llm(&self, stage: Stage) -> bool {
        let a = self.config.ablation;
        match stage {
            Stage::Parsed => a.decomposes(),
            Stage::Enriched => a.structural() || a.feature(),
            Stage::Answers => true,
            Stage::Pruned | Stage::Report => false,
        }
    }

    fn parse_record(&self, rec: &DatasetRecord, gw: Option<&Gateway>) -> RecordResult<ParsedRecord> {
        let decomposition = match gw {
            Some(gw) if self.config.ablation.decomposes() => {
                let d = decompose(&rec.id, &rec.question, gw, &self.templates, self.config.params())
                    .map_err(|e| e.to_string())?;
                d.decomposition
            }
            _ => QueryDecomposition::single(&rec.question),
        };
        Ok(ParsedRecord::new(&rec.id, &rec.question, &decomposition))
    }

    fn prune_record(&self, rec: &DatasetRecord, parsed: &UpstreamRows<ParsedRecord>) -> RecordResult<PrunedRecord> {
        let parsed = parsed.get(&rec.id)?;
        let g = rec.knowledge_graph().map_err(|e| e.to_string())?;
        let pruned = if self.config.ablation.prunes() {
            prune(&g, &parsed.flat, &self.cache, self.config.k).map_err(|e| e.to_string())?
        } else {
            PrunedGraph {
                kept: g
                    .triples()
                    .iter()
                    .map(|t| ScoredTriple { triple: t.clone(), channel_scores: [0.0; 3], total: 0.0 })
                    .collect(),
                k: g.len(),
                source_size: g.len(),
            }
        };
        Ok(PrunedRecord::new(&rec.id, &pruned))
    }

    fn enrich_record(
        &self,
        rec: &DatasetRecord,
        gw: Option<&Gateway>,
        parsed: &UpstreamRows<ParsedRecord>,
        pruned: &UpstreamRows<PrunedRecord>,
    ) -> RecordResult<EnrichedRecord> {
        let parsed = parsed.get(&rec.id)?;
        let pruned = pruned.get(&rec.id)?.to_pruned(rec.graph.len()).map_err(|e| e.to_string())?;
        let ablation = self.config.ablation;
        let mut warnings = EnrichWarnings::default();
        let mut generated = Vec::new();
        if let Some(gw) = gw.filter(|_| !pruned.is_empty() && (ablation.structural() || ablation.feature())) {
            let quads = build_quadruples(&pruned.as_graph(), &BTreeMap::new()).map_err(|e| e.to_string())?;
            let assoc =
                associate_queries(&quads, &parsed.flat, &self.cache, self.config.tau, self.config.max_quadruples)
                    .map_err(|e| e.to_string())?;
            if ablation.structural() {
                let prompt = render_structural_prompt(
                    self.templates.get(TemplateName::StructuralEnrich),
                    &structural_payload(&assoc),
                )
                .map_err(|e| e.to_string())?;
                let reply = gw
                    .complete(
                        &ChatRequest::user(prompt, self.config.params()),
                        &CallKey::new(TemplateName::StructuralEnrich, &rec.id),
                    )
                    .map_err(|e| e.to_string())?;
                let parsed = parse_structural_output(&reply.content);
                warnings.structural_skipped = parsed.skipped;
                generated.extend(parsed.triples);
            }
            if ablation.feature() {
                let prompt =
                    build_feature_prompt(self.templates.get(TemplateName::FeatureEnrich), &entity_contexts(&assoc))
                        .map_err(|e| e.to_string())?;
                let reply = gw
                    .complete(
                        &ChatRequest::user(prompt, self.config.params()),
                        &CallKey::new(TemplateName::FeatureEnrich, &rec.id),
                    )
                    .map_err(|e| e.to_string())?;
                let parsed = parse_feature_output(&reply.content);
                warnings.feature_rejected = parsed.rejected;
                generated.extend(parsed.triples);
            }
        } else if ablation.structural() || ablation.feature() {
            log::info!("{}: pruned graph is empty, nothing to enrich", rec.id);
        }
        let enriched = merge_enriched(pruned, generated);
        Ok(EnrichedRecord::new(&rec.id, &enriched, warnings))
    }

    fn answer_record(
        &self,
        rec: &DatasetRecord,
        gw: Option<&Gateway>,
        pruned: &UpstreamRows<PrunedRecord>,
        enriched: &UpstreamRows<EnrichedRecord>,
    ) -> RecordResult<QaRecord> {
        let gw = gw.ok_or("no llm provider")?;
        let triples = merged_triples(pruned.get(&rec.id)?, enriched.get(&rec.id)?)?;
        let prompt = build_qa_prompt(self.templates.get(TemplateName::QuestionAnswering), &rec.question, &triples)
            .map_err(|e| e.to_string())?;
        let reply = gw
            .complete(
                &ChatRequest::user(prompt, self.config.params()),
                &CallKey::new(TemplateName::QuestionAnswering, &rec.id),
            )
            .map_err(|e| e.to_string())?;
        let answers = parse_final_answers(&reply.content);
        Ok(QaRecord {
            id: rec.id.clone(),
            question: rec.question.clone(),
            raw: answers.raw,
            answers: answers.answers,
            gold: rec.answers.clone(),
        })
    }

    /// Questions without an answer row count as empty predictions.
    fn run_report(&self) -> Result<StageArtifact, PipelineError> {
        let answers = self.read_upstream::<QaRecord>(Stage::Report, Stage::Answers)?;
        let preds: Vec<AnswerSet> = self
            .dataset
            .iter()
            .map(|r| answers.rows.get(&r.id).map(QaRecord::answer_set).unwrap_or_default())
            .collect();
        let inputs: Vec<EvalInput<'_>> =
            self.dataset.iter().zip(&preds).map(|(r, p)| EvalInput { id: &r.id, pred: p, gold: &r.answers }).collect();
        let report = evaluate(&inputs)?;
        let path = self.artifact_path(Stage::Report);
        let body = to_pretty(&report)?;
        write_atomic(&path, &body).map_err(io_err(&path))?;
        write_json(&self.stage_dir.join(COST_REPORT), &cost_report(&self.ledger(), &self.config.prices))?;
        Ok(StageArtifact {
            stage: Stage::Report,
            path,
            content_hash: hash_bytes(&body),
            upstream_hash: Some(answers.hash),
            records: report.n,
            errors: 0,
        })
    }

    /// Every stage in order, then the evaluation report.
    pub fn run_all(&self) -> Result<RunSummary, PipelineError> {
        if !self.config.resume {
            for stage in Stage::ALL {
                let _ = fs::remove_file(self.stage_ledger_path(stage));
            }
        }
        let mut artifacts = Vec::new();
        for stage in Stage::ALL {
            artifacts.push(self.run_stage(stage)?);
        }
        Ok(RunSummary { report: self.read_report()?, ledger: self.ledger(), artifacts })
    }

    pub fn read_report(&self) -> Result<EvalReport, PipelineError> {
        let path = self.artifact_path(Stage::Report);
        if !path.exists() {
            return Err(PipelineError::MissingUpstream { stage: Stage::Report, upstream: Stage::Report, path });
        }
        read_json(&path)
    }

    pub fn cost_report(&self) -> CostReport {
        cost_report(&self.ledger(), &self.config.prices)
    }

    // -----------------------------------------------------------------------
    // Diagnostics
    // -----------------------------------------------------------------------

    fn queries_for(&self, parsed: &UpstreamRows<ParsedRecord>, rec: &DatasetRecord) -> Vec<String> {
        match parsed.rows.get(&rec.id) {
            Some(p) if !p.flat.is_empty() => p.flat.clone(),
            _ => vec![rec.question.clone()],
        }
    }

    fn parsed_or_empty(&self) -> UpstreamRows<ParsedRecord> {
        let path = self.artifact_path(Stage::Parsed);
        if path.exists() {
            read_jsonl_rows(&path).unwrap_or_default()
        } else {
            UpstreamRows::default()
        }
    }

    /// Coverage, token estimate and cost of the pruned graph for each k.
    /// Questions use their parsed decomposition when available, otherwise
    /// the raw question.
    pub fn sweep_k(&self, ks: &[usize]) -> Result<Vec<SweepRow>, PipelineError> {
        if ks.is_empty() || ks.contains(&0) {
            return Err(PipelineError::Config("ks must be non-empty and each at least 1".into()));
        }
        let parsed = self.parsed_or_empty();
        type Row<'a> = (String, Vec<ScoredTriple<f64>>, &'a [String]);
        let scored: Vec<Row> = self
            .dataset
            .par_iter()
            .map(|rec| {
                let g = rec.knowledge_graph().map_err(|e| PipelineError::Config(format!("{}: {e}", rec.id)))?;
                let queries = self.queries_for(&parsed, rec);
                let scored = score_graph(&g, &queries, &self.cache)
                    .map_err(|e| PipelineError::Config(format!("{}: {e}", rec.id)))?;
                Ok((rec.id.clone(), scored, rec.answers.as_slice()))
            })
            .collect::<Result<_, PipelineError>>()?;
        let mut rows = Vec::new();
        for &k in ks {
            let mut per_question = BTreeMap::new();
            let mut tokens = 0u64;
            for (id, s, gold) in &scored {
                let pruned = select_top_k(s.clone(), k).map_err(|e| PipelineError::Config(e.to_string()))?;
                let cov: f64 = answer_coverage_or_zero(&pruned, gold);
                tokens += pruned.kept.iter().map(|s| estimate_tokens(&textualize_triple(&s.triple))).sum::<u64>();
                per_question.insert(id.clone(), cov);
            }
            let coverage = if per_question.is_empty() {
                0.0
            } else {
                per_question.values().sum::<f64>() / per_question.len() as f64
            };
            rows.push(SweepRow { k, coverage, tokens, cost: self.config.prices.cost(tokens, 0), per_question });
        }
        let mut csv = String::from("k,coverage,tokens,cost\n");
        for r in &rows {
            csv.push_str(&format!("{},{},{},{}\n", r.k, r.coverage, r.tokens, r.cost));
        }
        let path = self.stage_dir.join(SWEEP_CSV);
        write_atomic(&path, csv.as_bytes()).map_err(io_err(&path))?;
        Ok(rows)
    }

    /// Rank of the first answer-bearing triple under vanilla scoring, each
    /// single channel and the combined channels.
    pub fn mrr(&self) -> Result<MrrReport, PipelineError> {
        let parsed = self.parsed_or_empty();
        let modes: Vec<(String, RankingMode)> = std::iter::once(("vanilla".to_string(), RankingMode::Vanilla))
            .chain(MaskChannel::ALL.into_iter().map(|c| (channel_label(c).to_string(), RankingMode::single(c))))
            .chain(std::iter::once(("combined".to_string(), RankingMode::combined())))
            .collect();
        let mut sums: BTreeMap<String, f64> = modes.iter().map(|(n, _)| (n.clone(), 0.0)).collect();
        let mut counted = 0usize;
        for rec in &self.dataset {
            let g = rec.knowledge_graph().map_err(|e| PipelineError::Config(format!("{}: {e}", rec.id)))?;
            let gold: BTreeSet<String> = rec.answers.iter().map(|a| crate::answering::normalize_answer(a)).collect();
            let answer_indices: BTreeSet<usize> = g
                .triples()
                .iter()
                .filter(|t| entity_names([*t]).iter().any(|n| gold.contains(n)))
                .map(|t| t.index)
                .collect();
            if answer_indices.is_empty() {
                continue;
            }
            let queries = self.queries_for(&parsed, rec);
            counted += 1;
            for (name, mode) in &modes {
                let rr = channel_mrr(&g, &queries, &answer_indices, mode, &self.cache)
                    .map_err(|e| PipelineError::Config(format!("{}: {e}", rec.id)))?;
                *sums.get_mut(name).expect("mode present") += rr;
            }
        }
        let mrr: BTreeMap<String, f64> =
            sums.into_iter().map(|(k, v)| (k, if counted == 0 { 0.0 } else { v / counted as f64 })).collect();
        let singles: Vec<f64> = MaskChannel::ALL.iter().map(|c| mrr[channel_label(*c)]).collect();
        let contribution = MaskChannel::ALL
            .iter()
            .zip(channel_contributions(&singles))
            .map(|(c, v)| (channel_label(*c).to_string(), v))
            .collect();
        let report = MrrReport { questions: counted, mrr, contribution };
        write_json(&self.stage_dir.join(MRR_JSON), &report)?;
        Ok(report)
    }

    /// Graph-quality metrics of the original, pruned and enriched graphs.
    pub fn quality(&self) -> Result<BTreeMap<String, GraphQualityReport>, PipelineError> {
        let scorer = self.config.kgc.build();
        let opts = QualityOptions {
            scorer: scorer.as_ref(),
            threshold: self.config.kgc_threshold,
            mode: self.config.redundancy_grouping,
        };
        let pruned = read_optional::<PrunedRecord>(&self.artifact_path(Stage::Pruned));
        let enriched = read_optional::<EnrichedRecord>(&self.artifact_path(Stage::Enriched));
        let mut variants: BTreeMap<String, Vec<(String, Vec<Triple>)>> = BTreeMap::new();
        let mut ids: Vec<&DatasetRecord> = self.dataset.iter().collect();
        ids.sort_by(|a, b| a.id.cmp(&b.id));
        for rec in ids {
            let g = rec.knowledge_graph().map_err(|e| PipelineError::Config(format!("{}: {e}", rec.id)))?;
            variants.entry("original".into()).or_default().push((rec.question.clone(), g.triples().to_vec()));
            let Some(p) = pruned.as_ref().and_then(|p| p.rows.get(&rec.id)) else { continue };
            let Ok(pg) = p.to_pruned(g.len()) else { continue };
            variants.entry("pruned".into()).or_default().push((rec.question.clone(), pg.triples()));
            if let Some(e) = enriched.as_ref().and_then(|e| e.rows.get(&rec.id)) {
                if let Ok(t) = merged_triples(p, e) {
                    variants.entry("enriched".into()).or_default().push((rec.question.clone(), t));
                }
            }
        }
        let mut out = BTreeMap::new();
        for (variant, graphs) in &variants {
            let reports: Vec<GraphQualityReport> = graphs
                .iter()
                .filter(|(_, t)| !t.is_empty())
                .map(|(q, t)| graph_quality(q, t, &self.cache, &opts))
                .collect::<Result<_, _>>()?;
            out.insert(variant.clone(), average_quality(&reports));
        }
        let sample: BTreeMap<&String, &[Triple]> =
            variants.iter().filter_map(|(v, gs)| gs.first().map(|(_, t)| (v, t.as_slice()))).collect();
        let rows: Vec<QualityExport<'_>> = out
            .iter()
            .map(|(variant, report)| QualityExport {
                dataset: &self.dataset_name,
                variant,
                report,
                triples: sample.get(variant).copied().unwrap_or(&[]),
            })
            .collect();
        export_quality_report(&rows, &self.stage_dir.join("quality"), &self.cache)?;
        write_json(&self.stage_dir.join(QUALITY_JSON), &out)?;
        Ok(out)
    }
}

fn channel_label(c: MaskChannel) -> &'static str {
    match c {
        MaskChannel::HeadMasked => "head_masked",
        MaskChannel::TailMasked => "tail_masked",
        MaskChannel::BothMasked => "both_masked",
    }
}

fn answer_coverage_or_zero(pruned: &PrunedGraph<f64>, gold: &[String]) -> f64 {
    coverage_of(pruned.kept.iter().map(|s| &s.triple), gold).unwrap_or(0.0)
}

/// Base triples of the pruned graph followed by the generated ones.
pub fn merged_triples(pruned: &PrunedRecord, enriched: &EnrichedRecord) -> RecordResult<Vec<Triple>> {
    let by_index: HashMap<usize, &crate::pruning::PrunedRow> = pruned.kept.iter().map(|r| (r.index, r)).collect();
    let mut out = Vec::new();
    for idx in &enriched.base_indices {
        let row = by_index.get(idx).ok_or_else(|| format!("enriched row refers to unknown triple {idx}"))?;
        out.push(Triple::from_strs(&row.s, &row.r, &row.o, row.index).map_err(|e| e.to_string())?);
    }
    let next = pruned.kept.iter().map(|r| r.index + 1).max().unwrap_or(0);
    out.extend(enriched.generated_triples(next).map_err(|e| e.to_string())?);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub report: EvalReport,
    pub ledger: LedgerSnapshot,
    pub artifacts: Vec<StageArtifact>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub coverage: f64,
    pub tokens: u64,
    pub cost: f64,
    pub per_question: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrrReport {
    pub questions: usize,
    pub mrr: BTreeMap<String, f64>,
    pub contribution: BTreeMap<String, f64>,
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

/// Rows of an upstream JSONL artifact keyed by id. Rows that fail to
/// deserialize are kept as per-id errors so only their records fail.
pub struct UpstreamRows<T> {
    pub rows: HashMap<String, T>,
    pub broken: HashMap<String, String>,
    pub hash: String,
}

impl<T> Default for UpstreamRows<T> {
    fn default() -> Self {
        Self { rows: HashMap::new(), broken: HashMap::new(), hash: String::new() }
    }
}

impl<T> UpstreamRows<T> {
    fn get(&self, id: &str) -> RecordResult<&T> {
        if let Some(e) = self.broken.get(id) {
            return Err(format!("upstream row unreadable: {e}"));
        }
        self.rows.get(id).ok_or_else(|| "no upstream row".to_string())
    }
}

#[derive(Deserialize)]
struct IdOnly {
    id: String,
}

fn read_jsonl_rows<T: DeserializeOwned>(path: &Path) -> Result<UpstreamRows<T>, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut out = UpstreamRows { hash: hash_bytes(&bytes), ..UpstreamRows::default() };
    for (i, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(&line) {
            Ok(row) => {
                let id = serde_json::from_str::<IdOnly>(&line).map(|r| r.id).unwrap_or_default();
                out.rows.insert(id, row);
            }
            Err(e) => match serde_json::from_str::<IdOnly>(&line) {
                Ok(r) => {
                    out.broken.insert(r.id, e.to_string());
                }
                Err(_) => log::warn!("{}:{}: unreadable row skipped", path.display(), i + 1),
            },
        }
    }
    Ok(out)
}

fn read_optional<T: DeserializeOwned>(path: &Path) -> Option<UpstreamRows<T>> {
    path.exists().then(|| read_jsonl_rows(path).ok()).flatten()
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| PipelineError::Json { path: path.to_path_buf(), source })
}

fn to_pretty<T: Serialize>(value: &T) -> Result<Vec<u8>, PipelineError> {
    let mut body =
        serde_json::to_vec_pretty(value).map_err(|source| PipelineError::Json { path: PathBuf::new(), source })?;
    body.push(b'\n');
    Ok(body)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    write_atomic(path, &to_pretty(value)?).map_err(io_err(path))
}

fn write_atomic(path: &Path, body: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, body)?;
    fs::rename(&tmp, path)
}
