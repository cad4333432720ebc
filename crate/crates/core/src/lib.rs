//! Knowledge-graph pruning, enrichment and question answering over
//! LLM-generated query decompositions.

pub mod answering;
pub mod embedding;
pub mod enrichment;
pub mod evaluation;
pub mod kg;
pub mod llm;
pub mod pipeline;
pub mod pruning;
pub mod query;
pub mod scalar;

pub use scalar::Scalar;

pub type Embedding = embedding::EmbeddingVector<f64>;
pub type Cache = embedding::EmbeddingCache<f64>;
pub type Scored = pruning::ScoredTriple<f64>;
pub type Pruned = pruning::PrunedGraph<f64>;
pub type Enriched = enrichment::EnrichedGraph<f64>;
