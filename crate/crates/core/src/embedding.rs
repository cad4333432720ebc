//! Text embeddings: the provider contract, a deterministic hashed
//! bag-of-words reference embedder, a remote HTTP embedder and a batch cache.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scalar::Scalar;

pub const REFERENCE_DIMENSION: usize = 256;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("non-finite value in embedding")]
    NonFinite,
    #[error("remote embedding failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("remote returned {got} embeddings for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("cache file: {0}")]
    Cache(String),
}

/// Fixed-length vector of finite reals, L2-normalized by every provider
/// in this module (the zero vector stands for empty text).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector<F> {
    values: Vec<F>,
}

impl<F: Scalar> EmbeddingVector<F> {
    pub fn new(values: Vec<F>) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn zeros(dimension: usize) -> Self {
        Self { values: vec![F::zero(); dimension] }
    }

    /// Scales to unit L2 norm; the zero vector is left as is.
    pub fn normalized(mut self) -> Self {
        let norm = self.values.iter().map(|v| *v * *v).sum::<F>().sqrt();
        if norm > F::zero() {
            for v in &mut self.values {
                *v = *v / norm;
            }
        }
        self
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> F {
        self.values.iter().map(|v| *v * *v).sum::<F>().sqrt()
    }
}

/// Dot product. For unit vectors this is cosine similarity.
pub fn similarity<F: Scalar>(a: &EmbeddingVector<F>, b: &EmbeddingVector<F>) -> Result<F, EmbeddingError> {
    if a.values.len() != b.values.len() {
        return Err(EmbeddingError::DimensionMismatch { left: a.values.len(), right: b.values.len() });
    }
    let mut acc = F::zero();
    for (x, y) in a.values.iter().zip(&b.values) {
        acc += *x * *y;
    }
    Ok(acc)
}

/// Euclidean distance, used by the plot-data exports.
pub fn euclidean<F: Scalar>(a: &EmbeddingVector<F>, b: &EmbeddingVector<F>) -> Result<F, EmbeddingError> {
    if a.values.len() != b.values.len() {
        return Err(EmbeddingError::DimensionMismatch { left: a.values.len(), right: b.values.len() });
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| (*x - *y) * (*x - *y)).sum::<F>().sqrt())
}

/// A text-embedding backend.
pub trait Embedder<F: Scalar>: Send + Sync {
    /// Stable identity used as the cache namespace.
    fn id(&self) -> &str;
    fn dimension(&self) -> usize;
    /// Embeds every text, preserving input order.
    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector<F>>, EmbeddingError>;
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_string).collect()
}

/// Hashed bag-of-words embedder: each token increments slot
/// `fnv1a64(token) % dimension`, then the count vector is L2-normalized.
///
/// Counts are integers and the norm is taken from their exact integer sum
/// of squares, so results are identical on every platform.
#[derive(Clone, Debug)]
pub struct ReferenceEmbedder {
    dimension: usize,
    id: String,
}

impl ReferenceEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension, id: format!("reference-fnv1a-{dimension}") }
    }

    pub fn slot(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dimension as u64) as usize
    }

    pub fn embed<F: Scalar>(&self, text: &str) -> EmbeddingVector<F> {
        let mut counts = vec![0u64; self.dimension];
        for token in tokenize(text) {
            counts[self.slot(&token)] += 1;
        }
        let sq: u64 = counts.iter().map(|c| c * c).sum();
        if sq == 0 {
            return EmbeddingVector::zeros(self.dimension);
        }
        let norm = F::from_u64(sq).unwrap_or_else(F::max_value).sqrt();
        let values = counts.into_iter().map(|c| F::from_u64(c).unwrap_or_else(F::zero) / norm).collect();
        EmbeddingVector { values }
    }
}

impl Default for ReferenceEmbedder {
    fn default() -> Self {
        Self::new(REFERENCE_DIMENSION)
    }
}

/// Reference embedding at the default dimension (256).
pub fn embed_reference<F: Scalar>(text: &str) -> EmbeddingVector<F> {
    ReferenceEmbedder::default().embed(text)
}

impl<F: Scalar> Embedder<F> for ReferenceEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector<F>>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.embed(t)).collect())
    }
}

/// Provider selection as it appears in run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingProviderSpec {
    Reference {
        #[serde(default = "default_dimension")]
        dimension: usize,
    },
    Remote {
        endpoint: String,
        model: String,
        dimension: usize,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_remote_retries")]
        max_retries: u32,
        #[serde(default = "default_remote_batch")]
        batch_size: usize,
    },
}

fn default_dimension() -> usize {
    REFERENCE_DIMENSION
}

fn default_remote_retries() -> u32 {
    3
}

fn default_remote_batch() -> usize {
    64
}

impl Default for EmbeddingProviderSpec {
    fn default() -> Self {
        Self::Reference { dimension: REFERENCE_DIMENSION }
    }
}

impl EmbeddingProviderSpec {
    pub fn dimension(&self) -> usize {
        match self {
            Self::Reference { dimension } | Self::Remote { dimension, .. } => *dimension,
        }
    }

    pub fn build<F: Scalar>(&self) -> Result<Arc<dyn Embedder<F>>, EmbeddingError> {
        match self {
            Self::Reference { dimension } => {
                if *dimension == 0 {
                    return Err(EmbeddingError::DimensionMismatch { left: 0, right: REFERENCE_DIMENSION });
                }
                Ok(Arc::new(ReferenceEmbedder::new(*dimension)))
            }
            Self::Remote { endpoint, model, dimension, api_key_env, max_retries, batch_size } => {
                let api_key = api_key_env.as_ref().and_then(|v| std::env::var(v).ok());
                Ok(Arc::new(RemoteEmbedder {
                    id: format!("remote:{model}@{endpoint}"),
                    endpoint: endpoint.clone(),
                    model: model.clone(),
                    dimension: *dimension,
                    api_key,
                    max_retries: *max_retries,
                    batch_size: (*batch_size).max(1),
                }))
            }
        }
    }
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    input: &'a [&'a str],
    model: &'a str,
}

#[derive(Deserialize)]
struct RemoteResponse {
    data: Vec<RemoteItem>,
}

#[derive(Deserialize)]
struct RemoteItem {
    embedding: Vec<f64>,
}

/// Embedding service speaking `{"input": [..], "model": ..}` →
/// `{"data": [{"embedding": [..]}]}`. Vectors are normalized on receipt.
pub struct RemoteEmbedder {
    id: String,
    endpoint: String,
    model: String,
    dimension: usize,
    api_key: Option<String>,
    max_retries: u32,
    batch_size: usize,
}

impl RemoteEmbedder {
    fn post(&self, chunk: &[&str]) -> Result<Vec<Vec<f64>>, String> {
        let mut req = ureq::post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(RemoteRequest { input: chunk, model: &self.model }).map_err(|e| e.to_string())?;
        let body: RemoteResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        Ok(body.data.into_iter().map(|d| d.embedding).collect())
    }
}

impl<F: Scalar> Embedder<F> for RemoteEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector<F>>, EmbeddingError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            let mut attempt = 0u32;
            let rows = loop {
                attempt += 1;
                match self.post(chunk) {
                    Ok(rows) => break rows,
                    Err(message) if attempt > self.max_retries => {
                        return Err(EmbeddingError::Transport { attempts: attempt, message });
                    }
                    Err(message) => {
                        log::warn!("embedding request failed (attempt {attempt}): {message}");
                        std::thread::sleep(Duration::from_millis(200 * (1 << attempt.min(6))));
                    }
                }
            };
            if rows.len() != chunk.len() {
                return Err(EmbeddingError::CountMismatch { expected: chunk.len(), got: rows.len() });
            }
            for row in rows {
                if row.len() != self.dimension {
                    return Err(EmbeddingError::DimensionMismatch { left: row.len(), right: self.dimension });
                }
                let v = EmbeddingVector::new(row.into_iter().map(F::from_f64_lossy).collect())?;
                out.push(v.normalized());
            }
        }
        Ok(out)
    }
}

/// Memoizing front for an [`Embedder`], keyed by `(provider id, text)`.
///
/// Readers share the map; misses within one batch are deduplicated and
/// computed in a single provider call, then inserted under the write lock.
pub struct EmbeddingCache<F: Scalar> {
    embedder: Arc<dyn Embedder<F>>,
    entries: RwLock<HashMap<String, Arc<EmbeddingVector<F>>>>,
    computed: AtomicUsize,
}

impl<F: Scalar> EmbeddingCache<F> {
    pub fn new(embedder: Arc<dyn Embedder<F>>) -> Self {
        Self { embedder, entries: RwLock::new(HashMap::new()), computed: AtomicUsize::new(0) }
    }

    pub fn provider_id(&self) -> &str {
        self.embedder.id()
    }

    pub fn dimension(&self) -> usize {
        self.embedder.dimension()
    }

    /// Number of texts the underlying provider has been asked to embed.
    pub fn computed(&self) -> usize {
        self.computed.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("embedding cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn embed(&self, text: &str) -> Result<Arc<EmbeddingVector<F>>, EmbeddingError> {
        Ok(self.embed_batch(&[text])?.pop().expect("one text in, one vector out"))
    }

    /// Embeds `texts` in order; repeated and previously seen texts are not
    /// recomputed.
    pub fn embed_batch<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Arc<EmbeddingVector<F>>>, EmbeddingError> {
        let mut missing: Vec<&str> = Vec::new();
        {
            let entries = self.entries.read().expect("embedding cache poisoned");
            let mut queued = std::collections::HashSet::new();
            for t in texts {
                let t = t.as_ref();
                if !entries.contains_key(t) && queued.insert(t) {
                    missing.push(t);
                }
            }
        }
        if !missing.is_empty() {
            let vectors = self.embedder.embed_texts(&missing)?;
            if vectors.len() != missing.len() {
                return Err(EmbeddingError::CountMismatch { expected: missing.len(), got: vectors.len() });
            }
            self.computed.fetch_add(missing.len(), Ordering::Relaxed);
            let mut entries = self.entries.write().expect("embedding cache poisoned");
            for (t, v) in missing.iter().zip(vectors) {
                entries.entry((*t).to_string()).or_insert_with(|| Arc::new(v));
            }
        }
        let entries = self.entries.read().expect("embedding cache poisoned");
        Ok(texts.iter().map(|t| Arc::clone(&entries[t.as_ref()])).collect())
    }

    /// Writes the cache as JSON keyed by SHA-256 of each text.
    pub fn save(&self, path: &Path) -> Result<(), EmbeddingError> {
        let entries = self.entries.read().expect("embedding cache poisoned");
        let mut map = std::collections::BTreeMap::new();
        for (text, v) in entries.iter() {
            map.insert(text_digest(text), v.values.iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>());
        }
        let file = CacheFile { provider_id: self.provider_id().to_string(), entries: map };
        let body = serde_json::to_vec(&file).map_err(|e| EmbeddingError::Cache(e.to_string()))?;
        std::fs::write(path, body).map_err(|e| EmbeddingError::Cache(e.to_string()))
    }

    /// Loads entries written by [`Self::save`] for the given texts. Entries
    /// from a different provider id are ignored. Returns how many were loaded.
    pub fn preload<S: AsRef<str>>(&self, path: &Path, texts: &[S]) -> Result<usize, EmbeddingError> {
        let body = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(EmbeddingError::Cache(e.to_string())),
        };
        let file: CacheFile = serde_json::from_slice(&body).map_err(|e| EmbeddingError::Cache(e.to_string()))?;
        if file.provider_id != self.provider_id() {
            return Ok(0);
        }
        let mut entries = self.entries.write().expect("embedding cache poisoned");
        let mut loaded = 0;
        for t in texts {
            let t = t.as_ref();
            if let Some(values) = file.entries.get(&text_digest(t)) {
                let v = EmbeddingVector::new(values.iter().map(|x| F::from_f64_lossy(*x)).collect())?;
                entries.insert(t.to_string(), Arc::new(v));
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    provider_id: String,
    entries: std::collections::BTreeMap<String, Vec<f64>>,
}

pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}
