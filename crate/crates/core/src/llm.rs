//! Text-generation gateway: prompt templates, provider abstraction,
//! retry with exponential backoff, scripted stubs and the call/token/cost
//! ledger.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::text_digest;

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("missing binding for placeholder {0}")]
    MissingBinding(String),
    #[error("template {template} does not contain placeholder {{{placeholder}}}")]
    UndeclaredPlaceholder { template: String, placeholder: String },
    #[error("reading template {0}: {1}")]
    Io(String, String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    QueryStructuring,
    StructuralEnrich,
    FeatureEnrich,
    QuestionAnswering,
    CotBaseline,
}

impl TemplateName {
    pub const ALL: [TemplateName; 5] = [
        TemplateName::QueryStructuring,
        TemplateName::StructuralEnrich,
        TemplateName::FeatureEnrich,
        TemplateName::QuestionAnswering,
        TemplateName::CotBaseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::QueryStructuring => "query_structuring",
            TemplateName::StructuralEnrich => "structural_enrich",
            TemplateName::FeatureEnrich => "feature_enrich",
            TemplateName::QuestionAnswering => "question_answering",
            TemplateName::CotBaseline => "cot_baseline",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.txt", self.as_str())
    }

    /// Placeholders the renderer fills for this template. Other brace
    /// spans in the bodies (`{instruction}`, `{result}`, ...) are literal.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateName::QueryStructuring | TemplateName::CotBaseline => &["question"],
            TemplateName::StructuralEnrich => &["quadruples", "1-hop path", "2-hop path"],
            TemplateName::FeatureEnrich => &["entity list"],
            TemplateName::QuestionAnswering => &["question", "knowledge graph"],
        }
    }

    fn builtin_body(self) -> &'static str {
        match self {
            TemplateName::QueryStructuring => include_str!("../templates/query_structuring.txt"),
            TemplateName::StructuralEnrich => include_str!("../templates/structural_enrich.txt"),
            TemplateName::FeatureEnrich => include_str!("../templates/feature_enrich.txt"),
            TemplateName::QuestionAnswering => include_str!("../templates/question_answering.txt"),
            TemplateName::CotBaseline => include_str!("../templates/cot_baseline.txt"),
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TemplateName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateName::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| format!("unknown template {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(name: TemplateName, body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        for p in name.placeholders() {
            if !body.contains(&format!("{{{p}}}")) {
                return Err(TemplateError::UndeclaredPlaceholder {
                    template: name.as_str().into(),
                    placeholder: (*p).into(),
                });
            }
        }
        Ok(Self { name, body })
    }
}

/// Literal substitution of the template's declared placeholders in a
/// single left-to-right pass, so bound values are never re-expanded.
pub fn render_template(t: &PromptTemplate, bindings: &[(&str, &str)]) -> Result<String, TemplateError> {
    render_with(&t.body, t.name.placeholders(), bindings)
}

/// Renders an arbitrary body with an explicit placeholder list.
pub fn render_with(body: &str, placeholders: &[&str], bindings: &[(&str, &str)]) -> Result<String, TemplateError> {
    let lookup: HashMap<&str, &str> = bindings.iter().copied().collect();
    for p in placeholders {
        if !lookup.contains_key(p) {
            return Err(TemplateError::MissingBinding((*p).to_string()));
        }
    }
    let mut out = String::with_capacity(body.len());
    let mut rest = body;
    'scan: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        for p in placeholders {
            if let Some(after) = tail.strip_prefix(*p).and_then(|t| t.strip_prefix('}')) {
                out.push_str(lookup[p]);
                rest = after;
                continue 'scan;
            }
        }
        out.push('{');
        rest = tail;
    }
    out.push_str(rest);
    Ok(out)
}

/// The five prompt templates.
#[derive(Clone, Debug)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateName, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = TemplateName::ALL
            .into_iter()
            .map(|n| (n, PromptTemplate { name: n, body: n.builtin_body().to_string() }))
            .collect();
        Self { templates }
    }

    /// Loads `<name>.txt` files from `dir`; names without a file keep the
    /// built-in body.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        for name in TemplateName::ALL {
            let path = dir.join(name.file_name());
            match std::fs::read_to_string(&path) {
                Ok(body) => {
                    set.templates.insert(name, PromptTemplate::new(name, body)?);
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    log::debug!("template {} not in {}, using built-in", name, dir.display());
                }
                Err(e) => return Err(TemplateError::Io(path.display().to_string(), e.to_string())),
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }

    /// Writes every template to `dir` as `<name>.txt`.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for t in self.templates.values() {
            std::fs::write(dir.join(t.name.file_name()), &t.body)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Requests and providers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// Sampling parameters. Defaults: temperature 0.2, top-p 1, n 1 and the
/// provider's maximum output length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "one_f64")]
    pub top_p: f64,
    #[serde(default = "one_u32")]
    pub n: u32,
    #[serde(default)]
    pub max_tokens: Option<u32>,
}

pub fn default_temperature() -> f64 {
    0.2
}

fn one_f64() -> f64 {
    1.0
}

fn one_u32() -> u32 {
    1
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { temperature: default_temperature(), top_p: 1.0, n: 1, max_tokens: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub params: GenerationParams,
}

#[derive(Debug, Error, PartialEq)]
pub enum RequestError {
    #[error("request has no messages")]
    NoMessages,
    #[error("temperature must be >= 0, got {0}")]
    Temperature(f64),
    #[error("n must be >= 1")]
    ZeroSamples,
}

impl ChatRequest {
    pub fn user(prompt: impl Into<String>, params: GenerationParams) -> Self {
        Self { messages: vec![ChatMessage { role: Role::User, content: prompt.into() }], params }
    }

    pub fn validate(&self) -> Result<(), RequestError> {
        if self.messages.is_empty() {
            return Err(RequestError::NoMessages);
        }
        if self.params.temperature.is_nan() || self.params.temperature < 0.0 {
            return Err(RequestError::Temperature(self.params.temperature));
        }
        if self.params.n == 0 {
            return Err(RequestError::ZeroSamples);
        }
        Ok(())
    }

    pub fn prompt_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub provider_id: String,
    /// False when token counts came from [`estimate_tokens`].
    pub usage_reported: bool,
}

/// Identifies which pipeline step and question a call belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CallKey {
    pub template: TemplateName,
    pub question_id: String,
}

impl CallKey {
    pub fn new(template: TemplateName, question_id: impl Into<String>) -> Self {
        Self { template, question_id: question_id.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProviderReply {
    pub content: String,
    pub usage: Option<Usage>,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("{message}")]
pub struct ProviderError {
    pub message: String,
    /// Transient failures are retried; permanent ones fail immediately.
    pub transient: bool,
}

impl ProviderError {
    pub fn transient(message: impl Into<String>) -> Self {
        Self { message: message.into(), transient: true }
    }

    pub fn permanent(message: impl Into<String>) -> Self {
        Self { message: message.into(), transient: false }
    }
}

pub trait ChatProvider: Send + Sync {
    fn id(&self) -> &str;
    fn send(&self, request: &ChatRequest, key: &CallKey) -> Result<ProviderReply, ProviderError>;
}

/// `ceil(utf8 bytes / 4)`; used only when a provider reports no usage.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingKeyPolicy {
    #[default]
    Error,
    /// Reply with the prompt itself.
    Echo,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StubKeyMode {
    /// Look up by `(template, question id)`.
    #[default]
    Key,
    /// Look up by SHA-256 of the rendered prompt (golden tests).
    PromptHash,
}

/// Canned-response provider for offline runs.
#[derive(Clone, Debug, Default)]
pub struct ScriptedStub {
    by_key: HashMap<(TemplateName, String), String>,
    by_hash: HashMap<String, String>,
    mode: StubKeyMode,
    on_missing: MissingKeyPolicy,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StubEntry {
    pub template: TemplateName,
    pub id: String,
    pub content: String,
}

/// On-disk form of a [`ScriptedStub`].
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StubFile {
    #[serde(default)]
    pub mode: StubKeyMode,
    #[serde(default)]
    pub on_missing: MissingKeyPolicy,
    #[serde(default)]
    pub responses: Vec<StubEntry>,
    #[serde(default)]
    pub by_hash: BTreeMap<String, String>,
}

impl ScriptedStub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_response(mut self, template: TemplateName, id: impl Into<String>, content: impl Into<String>) -> Self {
        self.insert(template, id, content);
        self
    }

    pub fn insert(&mut self, template: TemplateName, id: impl Into<String>, content: impl Into<String>) {
        self.by_key.insert((template, id.into()), content.into());
    }

    pub fn insert_prompt(&mut self, prompt: &str, content: impl Into<String>) {
        self.by_hash.insert(text_digest(prompt), content.into());
    }

    pub fn with_mode(mut self, mode: StubKeyMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_missing_policy(mut self, policy: MissingKeyPolicy) -> Self {
        self.on_missing = policy;
        self
    }

    pub fn from_file(file: StubFile) -> Self {
        let mut stub = Self { mode: file.mode, on_missing: file.on_missing, ..Self::default() };
        for e in file.responses {
            stub.insert(e.template, e.id, e.content);
        }
        stub.by_hash = file.by_hash.into_iter().collect();
        stub
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::permanent(format!("reading stub file {}: {e}", path.display())))?;
        let file: StubFile = serde_json::from_str(&text)
            .map_err(|e| ProviderError::permanent(format!("parsing stub file {}: {e}", path.display())))?;
        Ok(Self::from_file(file))
    }
}

impl ChatProvider for ScriptedStub {
    fn id(&self) -> &str {
        "scripted-stub"
    }

    fn send(&self, request: &ChatRequest, key: &CallKey) -> Result<ProviderReply, ProviderError> {
        let prompt = request.prompt_text();
        let hit = match self.mode {
            StubKeyMode::Key => self.by_key.get(&(key.template, key.question_id.clone())),
            StubKeyMode::PromptHash => self.by_hash.get(&text_digest(&prompt)),
        };
        match (hit, self.on_missing) {
            (Some(content), _) => Ok(ProviderReply { content: content.clone(), usage: None }),
            (None, MissingKeyPolicy::Echo) => Ok(ProviderReply { content: prompt, usage: None }),
            (None, MissingKeyPolicy::Error) => Err(ProviderError::permanent(format!(
                "no scripted response for ({}, {})",
                key.template, key.question_id
            ))),
        }
    }
}

/// OpenAI-compatible chat-completions endpoint.
pub struct RemoteChatProvider {
    id: String,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    timeout: Duration,
}

impl RemoteChatProvider {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        let endpoint = endpoint.into();
        let model = model.into();
        Self { id: format!("remote:{model}"), endpoint, model, api_key, timeout: Duration::from_secs(120) }
    }

    pub fn request_body(&self, request: &ChatRequest) -> serde_json::Value {
        let mut body = serde_json::json!({
            "model": self.model,
            "messages": request.messages,
            "temperature": request.params.temperature,
            "top_p": request.params.top_p,
            "n": request.params.n,
        });
        if let Some(max) = request.params.max_tokens {
            body["max_tokens"] = max.into();
        }
        body
    }
}

#[derive(Deserialize)]
struct RemoteChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct RemoteChoice {
    message: RemoteChoiceMessage,
}

#[derive(Deserialize)]
struct RemoteUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct RemoteChatResponse {
    choices: Vec<RemoteChoice>,
    usage: Option<RemoteUsage>,
}

/// Parses a chat-completions response body.
pub fn parse_remote_response(body: &str) -> Result<ProviderReply, ProviderError> {
    let parsed: RemoteChatResponse =
        serde_json::from_str(body).map_err(|e| ProviderError::permanent(format!("bad response body: {e}")))?;
    let content = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| ProviderError::permanent("response has no choices"))?;
    Ok(ProviderReply {
        content,
        usage: parsed.usage.map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens }),
    })
}

impl ChatProvider for RemoteChatProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, request: &ChatRequest, _key: &CallKey) -> Result<ProviderReply, ProviderError> {
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(self.timeout)).http_status_as_error(false).build().into();
        let mut req = agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp =
            req.send_json(self.request_body(request)).map_err(|e| ProviderError::transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| ProviderError::transient(e.to_string()))?;
        match status {
            200..=299 => parse_remote_response(&body),
            408 | 409 | 429 | 500..=599 => Err(ProviderError::transient(format!("HTTP {status}: {body}"))),
            _ => Err(ProviderError::permanent(format!("HTTP {status}: {body}"))),
        }
    }
}

/// Provider selection as it appears in run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LlmProviderSpec {
    Stub {
        path: std::path::PathBuf,
    },
    Remote {
        endpoint: String,
        model: String,
        #[serde(default = "default_api_key_env")]
        api_key_env: String,
    },
}

fn default_api_key_env() -> String {
    "OPENAI_API_KEY".into()
}

impl LlmProviderSpec {
    pub fn build(&self) -> Result<Arc<dyn ChatProvider>, ProviderError> {
        match self {
            Self::Stub { path } => Ok(Arc::new(ScriptedStub::load(path)?)),
            Self::Remote { endpoint, model, api_key_env } => {
                let key = std::env::var(api_key_env).ok();
                if key.is_none() {
                    log::warn!("environment variable {api_key_env} is not set; sending unauthenticated requests");
                }
                Ok(Arc::new(RemoteChatProvider::new(endpoint.clone(), model.clone(), key)))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Ledger
// ---------------------------------------------------------------------------

/// Usage for one question. `calls` counts logical calls; `attempts`
/// includes retries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub calls: u64,
    pub attempts: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl LedgerEntry {
    pub fn add(&mut self, other: &LedgerEntry) {
        self.calls += other.calls;
        self.attempts += other.attempts;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
    }

    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub per_question: BTreeMap<String, LedgerEntry>,
    pub totals: LedgerEntry,
}

impl LedgerSnapshot {
    pub fn sum_of_entries(&self) -> LedgerEntry {
        let mut acc = LedgerEntry::default();
        for e in self.per_question.values() {
            acc.add(e);
        }
        acc
    }
}

/// Thread-safe per-question usage ledger. Running totals are updated under
/// the same lock as the entry, so they always equal the sum of entries.
#[derive(Debug, Default)]
pub struct CostLedger {
    state: Mutex<LedgerSnapshot>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_snapshot(snapshot: LedgerSnapshot) -> Self {
        Self { state: Mutex::new(snapshot) }
    }

    pub fn record(&self, question_id: &str, entry: LedgerEntry) {
        let mut state = self.state.lock().expect("ledger poisoned");
        state.per_question.entry(question_id.to_string()).or_default().add(&entry);
        state.totals.add(&entry);
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        self.state.lock().expect("ledger poisoned").clone()
    }

    pub fn entry(&self, question_id: &str) -> LedgerEntry {
        self.state.lock().expect("ledger poisoned").per_question.get(question_id).copied().unwrap_or_default()
    }

    pub fn totals(&self) -> LedgerEntry {
        self.state.lock().expect("ledger poisoned").totals
    }
}

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay_ms: 500, max_delay_ms: 8_000 }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: u32) -> Self {
        Self { max_retries, base_delay_ms: 0, max_delay_ms: 0 }
    }

    /// Backoff before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64 << (retry.saturating_sub(1)).min(20);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    Request(#[from] RequestError),
    #[error("{key} failed after {attempts} attempt(s): {source}")]
    Transport {
        key: String,
        attempts: u32,
        #[source]
        source: ProviderError,
    },
}

/// Counting semaphore bounding in-flight calls.
#[derive(Debug)]
struct InFlight {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.current.lock().expect("in-flight poisoned");
        while *n >= self.max {
            n = self.freed.wait(n).expect("in-flight poisoned");
        }
        *n += 1;
        InFlightGuard { owner: self }
    }
}

struct InFlightGuard<'a> {
    owner: &'a InFlight,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.owner.current.lock().expect("in-flight poisoned");
        *n -= 1;
        self.owner.freed.notify_one();
    }
}

/// Front door for every generation call in the pipeline.
pub struct Gateway {
    provider: Arc<dyn ChatProvider>,
    retry: RetryPolicy,
    ledger: Arc<CostLedger>,
    in_flight: InFlight,
    min_interval: Option<Duration>,
    last_start: Mutex<Option<Instant>>,
    next_correlation: AtomicU64,
}

impl Gateway {
    pub fn new(provider: Arc<dyn ChatProvider>) -> Self {
        Self {
            provider,
            retry: RetryPolicy::default(),
            ledger: Arc::new(CostLedger::new()),
            in_flight: InFlight { max: 8, current: Mutex::new(0), freed: Condvar::new() },
            min_interval: None,
            last_start: Mutex::new(None),
            next_correlation: AtomicU64::new(1),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_ledger(mut self, ledger: Arc<CostLedger>) -> Self {
        self.ledger = ledger;
        self
    }

    pub fn with_max_in_flight(mut self, max: usize) -> Self {
        self.in_flight.max = max.max(1);
        self
    }

    /// Minimum spacing between attempt starts (a simple rate limit).
    pub fn with_min_interval(mut self, interval: Option<Duration>) -> Self {
        self.min_interval = interval;
        self
    }

    pub fn ledger(&self) -> &Arc<CostLedger> {
        &self.ledger
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    fn pace(&self) {
        let Some(interval) = self.min_interval else { return };
        let mut last = self.last_start.lock().expect("rate limiter poisoned");
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < interval {
                std::thread::sleep(interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    /// One logical call. Transient failures are retried with exponential
    /// backoff; the ledger gets one call plus every attempt.
    pub fn complete(&self, request: &ChatRequest, key: &CallKey) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let correlation = self.next_correlation.fetch_add(1, Ordering::Relaxed);
        let _permit = self.in_flight.acquire();
        let mut attempts = 0u32;
        let outcome = loop {
            attempts += 1;
            self.pace();
            match self.provider.send(request, key) {
                Ok(reply) => break Ok(reply),
                Err(e) if e.transient && attempts <= self.retry.max_retries => {
                    log::warn!(
                        "call #{correlation} {}/{} attempt {attempts} failed: {e}",
                        key.template,
                        key.question_id
                    );
                    std::thread::sleep(self.retry.delay(attempts));
                }
                Err(e) => break Err(e),
            }
        };
        match outcome {
            Ok(reply) => {
                let (usage, reported) = match reply.usage {
                    Some(u) => (u, true),
                    None => (
                        Usage {
                            prompt_tokens: estimate_tokens(&request.prompt_text()),
                            completion_tokens: estimate_tokens(&reply.content),
                        },
                        false,
                    ),
                };
                self.ledger.record(
                    &key.question_id,
                    LedgerEntry {
                        calls: 1,
                        attempts: u64::from(attempts),
                        prompt_tokens: usage.prompt_tokens,
                        completion_tokens: usage.completion_tokens,
                    },
                );
                Ok(ChatResponse {
                    content: reply.content,
                    prompt_tokens: usage.prompt_tokens,
                    completion_tokens: usage.completion_tokens,
                    provider_id: self.provider.id().to_string(),
                    usage_reported: reported,
                })
            }
            Err(source) => {
                self.ledger.record(
                    &key.question_id,
                    LedgerEntry { calls: 1, attempts: u64::from(attempts), ..LedgerEntry::default() },
                );
                Err(GatewayError::Transport { key: format!("{}/{}", key.template, key.question_id), attempts, source })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Cost report
// ---------------------------------------------------------------------------

/// Per-token prices in currency units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prices {
    pub input_per_token: f64,
    pub output_per_token: f64,
}

impl Prices {
    pub fn cost(&self, prompt_tokens: u64, completion_tokens: u64) -> f64 {
        prompt_tokens as f64 * self.input_per_token + completion_tokens as f64 * self.output_per_token
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionCost {
    pub calls: u64,
    pub attempts: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    pub cost: f64,
}

impl QuestionCost {
    fn from_entry(e: &LedgerEntry, prices: &Prices) -> Self {
        Self {
            calls: e.calls,
            attempts: e.attempts,
            prompt_tokens: e.prompt_tokens,
            completion_tokens: e.completion_tokens,
            total_tokens: e.total_tokens(),
            cost: prices.cost(e.prompt_tokens, e.completion_tokens),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostMeans {
    pub calls: f64,
    pub prompt_tokens: f64,
    pub completion_tokens: f64,
    pub total_tokens: f64,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub questions: usize,
    pub per_question: BTreeMap<String, QuestionCost>,
    pub totals: QuestionCost,
    pub mean_per_question: CostMeans,
}

pub fn cost_report(ledger: &LedgerSnapshot, prices: &Prices) -> CostReport {
    let per_question: BTreeMap<_, _> =
        ledger.per_question.iter().map(|(id, e)| (id.clone(), QuestionCost::from_entry(e, prices))).collect();
    let totals = QuestionCost::from_entry(&ledger.sum_of_entries(), prices);
    let n = per_question.len();
    let mean = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
    let total_cost: f64 = per_question.values().map(|q| q.cost).sum();
    let mean_per_question = CostMeans {
        calls: mean(totals.calls as f64),
        prompt_tokens: mean(totals.prompt_tokens as f64),
        completion_tokens: mean(totals.completion_tokens as f64),
        total_tokens: mean(totals.total_tokens as f64),
        cost: mean(total_cost),
    };
    CostReport { questions: n, per_question, totals, mean_per_question }
}

impl CostReport {
    /// Per-question means in the `# LLM Call | Total Token | Total Cost`
    /// layout, with the prompt/completion split alongside.
    pub fn render_table(&self, label: &str) -> String {
        let m = &self.mean_per_question;
        let mut out = String::new();
        out.push_str("| Model | # LLM Call | Total Token | Prompt Token | Completion Token | Total Cost |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        out.push_str(&format!(
            "| {label} | {:.1} | {:.1} | {:.1} | {:.1} | {:.2E} |\n",
            m.calls, m.total_tokens, m.prompt_tokens, m.completion_tokens, m.cost
        ));
        out
    }
}
