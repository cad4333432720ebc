//! Focus-aware multi-channel pruning.
//!
//! Every triple is rendered three ways with the head, the tail, or both
//! replaced by `[MASK]`. A triple's score in one channel is the summed
//! similarity between every query in Q and that masked rendering; its total
//! score is the sum over the three channels. The top `k` triples by total
//! score form the pruned graph.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answering::normalize_answer;
use crate::embedding::{similarity, EmbeddingCache, EmbeddingError};
use crate::kg::{join_words, textualize_triple, KnowledgeGraph, Triple};
use crate::scalar::Scalar;

pub const MASK_TOKEN: &str = "[MASK]";
pub const DEFAULT_TOP_K: usize = 300;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("query set is empty")]
    NoQueries,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("gold answer set is empty")]
    NoGold,
    #[error("answer triple set is empty")]
    NoAnswerTriples,
    #[error("embedding: {0}")]
    Embedding(#[from] EmbeddingError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MaskChannel {
    /// `(?, r, o)`
    HeadMasked,
    /// `(s, r, ?)`
    TailMasked,
    /// `(?, r, ?)`
    BothMasked,
}

impl MaskChannel {
    pub const ALL: [MaskChannel; 3] = [MaskChannel::HeadMasked, MaskChannel::TailMasked, MaskChannel::BothMasked];

    pub fn position(self) -> usize {
        match self {
            MaskChannel::HeadMasked => 0,
            MaskChannel::TailMasked => 1,
            MaskChannel::BothMasked => 2,
        }
    }
}

/// Textualized triple with the masked slot(s) replaced by `[MASK]`.
pub fn render_masked(t: &Triple, channel: MaskChannel) -> String {
    let rel = t.relation.text();
    let (s, o) = match channel {
        MaskChannel::HeadMasked => (MASK_TOKEN, t.object.name()),
        MaskChannel::TailMasked => (t.subject.name(), MASK_TOKEN),
        MaskChannel::BothMasked => (MASK_TOKEN, MASK_TOKEN),
    };
    join_words(&[s, &rel, o])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTriple<F> {
    pub triple: Triple,
    /// Indexed by [`MaskChannel::position`]; each already summed over Q.
    pub channel_scores: [F; 3],
    pub total: F,
}

/// Scores every triple of `g` against the queries in `queries`.
///
/// Summation order is fixed (channels in order, queries in order), so the
/// result is bitwise identical however the work is split across threads.
pub fn score_graph<F: Scalar>(
    g: &KnowledgeGraph,
    queries: &[String],
    cache: &EmbeddingCache<F>,
) -> Result<Vec<ScoredTriple<F>>, PruneError> {
    score_triples(g.triples(), queries, cache)
}

pub fn score_triples<F: Scalar>(
    triples: &[Triple],
    queries: &[String],
    cache: &EmbeddingCache<F>,
) -> Result<Vec<ScoredTriple<F>>, PruneError> {
    if queries.is_empty() {
        return Err(PruneError::NoQueries);
    }
    let query_vecs = cache.embed_batch(queries)?;
    let masked: Vec<String> =
        triples.iter().flat_map(|t| MaskChannel::ALL.into_iter().map(move |c| render_masked(t, c))).collect();
    let masked_vecs = cache.embed_batch(&masked)?;
    triples
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut channel_scores = [F::zero(); 3];
            for (c, slot) in channel_scores.iter_mut().enumerate() {
                let mv = &masked_vecs[i * 3 + c];
                for qv in &query_vecs {
                    *slot += similarity(qv, mv)?;
                }
            }
            let total = channel_scores[0] + channel_scores[1] + channel_scores[2];
            Ok(ScoredTriple { triple: t.clone(), channel_scores, total })
        })
        .collect()
}

/// Descending score, ties by ascending triple index.
fn rank_order<F: Scalar>(a: (F, usize), b: (F, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrunedGraph<F> {
    pub kept: Vec<ScoredTriple<F>>,
    pub k: usize,
    pub source_size: usize,
}

impl<F: Scalar> PrunedGraph<F> {
    pub fn triples(&self) -> Vec<Triple> {
        self.kept.iter().map(|s| s.triple.clone()).collect()
    }

    /// The kept triples as a graph that retains their source indices.
    pub fn as_graph(&self) -> KnowledgeGraph {
        KnowledgeGraph::from_subgraph(self.triples())
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

pub fn select_top_k<F: Scalar>(mut scored: Vec<ScoredTriple<F>>, k: usize) -> Result<PrunedGraph<F>, PruneError> {
    if k == 0 {
        return Err(PruneError::ZeroK);
    }
    let source_size = scored.len();
    scored.sort_by(|a, b| rank_order((a.total, a.triple.index), (b.total, b.triple.index)));
    scored.truncate(k);
    Ok(PrunedGraph { kept: scored, k, source_size })
}

/// Scores and prunes in one step.
pub fn prune<F: Scalar>(
    g: &KnowledgeGraph,
    queries: &[String],
    cache: &EmbeddingCache<F>,
    k: usize,
) -> Result<PrunedGraph<F>, PruneError> {
    if k == 0 {
        return Err(PruneError::ZeroK);
    }
    select_top_k(score_graph(g, queries, cache)?, k)
}

/// Normalized ids and labels of every entity in `triples`.
pub fn entity_names<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> HashSet<String> {
    let mut names = HashSet::new();
    for t in triples {
        for e in [&t.subject, &t.object] {
            names.insert(normalize_answer(e.id()));
            if let Some(l) = e.label() {
                names.insert(normalize_answer(l));
            }
        }
    }
    names
}

/// Fraction of gold answers that appear as a subject or object of `triples`.
pub fn coverage_of<'a, F: Scalar>(
    triples: impl IntoIterator<Item = &'a Triple>,
    gold: &[String],
) -> Result<F, PruneError> {
    if gold.is_empty() {
        return Err(PruneError::NoGold);
    }
    let names = entity_names(triples);
    let hits = gold.iter().filter(|a| names.contains(&normalize_answer(a))).count();
    Ok(F::from_usize_lossy(hits) / F::from_usize_lossy(gold.len()))
}

/// `# answers in pruned graph / # total answers`.
pub fn answer_coverage<F: Scalar>(pruned: &PrunedGraph<F>, gold: &[String]) -> Result<F, PruneError> {
    coverage_of(pruned.kept.iter().map(|s| &s.triple), gold)
}

/// Scoring used for a ranking diagnostic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RankingMode {
    /// Unmasked triple text against the raw question only.
    Vanilla,
    /// Sum of the chosen channels over every query in Q.
    Channels(BTreeSet<MaskChannel>),
}

impl RankingMode {
    pub fn combined() -> Self {
        RankingMode::Channels(MaskChannel::ALL.into_iter().collect())
    }

    pub fn single(channel: MaskChannel) -> Self {
        RankingMode::Channels([channel].into_iter().collect())
    }
}

/// Per-triple score under `mode`, in graph order.
pub fn ranking_scores<F: Scalar>(
    g: &KnowledgeGraph,
    queries: &[String],
    mode: &RankingMode,
    cache: &EmbeddingCache<F>,
) -> Result<Vec<F>, PruneError> {
    if queries.is_empty() {
        return Err(PruneError::NoQueries);
    }
    match mode {
        RankingMode::Vanilla => {
            let q = cache.embed(&queries[0])?;
            let texts: Vec<String> = g.triples().iter().map(textualize_triple).collect();
            let vecs = cache.embed_batch(&texts)?;
            vecs.iter().map(|v| Ok(similarity(&q, v)?)).collect()
        }
        RankingMode::Channels(channels) => {
            let scored = score_graph(g, queries, cache)?;
            Ok(scored
                .iter()
                .map(|s| {
                    let mut acc = F::zero();
                    for c in MaskChannel::ALL {
                        if channels.contains(&c) {
                            acc += s.channel_scores[c.position()];
                        }
                    }
                    acc
                })
                .collect())
        }
    }
}

/// 1-based rank of the best-ranked answer triple under `mode`.
pub fn best_answer_rank<F: Scalar>(
    g: &KnowledgeGraph,
    queries: &[String],
    answer_indices: &BTreeSet<usize>,
    mode: &RankingMode,
    cache: &EmbeddingCache<F>,
) -> Result<Option<usize>, PruneError> {
    if answer_indices.is_empty() {
        return Err(PruneError::NoAnswerTriples);
    }
    let scores = ranking_scores(g, queries, mode, cache)?;
    let mut order: Vec<(F, usize)> = scores.into_iter().zip(g.triples().iter().map(|t| t.index)).collect();
    order.sort_by(|a, b| rank_order(*a, *b));
    Ok(order.iter().position(|(_, idx)| answer_indices.contains(idx)).map(|p| p + 1))
}

/// Reciprocal rank of the best-ranked answer triple (0 if none is present).
pub fn channel_mrr<F: Scalar>(
    g: &KnowledgeGraph,
    queries: &[String],
    answer_indices: &BTreeSet<usize>,
    mode: &RankingMode,
    cache: &EmbeddingCache<F>,
) -> Result<F, PruneError> {
    Ok(match best_answer_rank(g, queries, answer_indices, mode, cache)? {
        Some(rank) => F::one() / F::from_usize_lossy(rank),
        None => F::zero(),
    })
}

/// Each channel's share of the summed MRR.
pub fn channel_contributions<F: Scalar>(mrrs: &[F]) -> Vec<F> {
    let total: F = mrrs.iter().copied().sum();
    if total <= F::zero() {
        return vec![F::zero(); mrrs.len()];
    }
    mrrs.iter().map(|m| *m / total).collect()
}

/// Row of `pruned.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunedRecord {
    pub id: String,
    pub k: usize,
    pub kept: Vec<PrunedRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunedRow {
    pub s: String,
    pub r: String,
    pub o: String,
    pub index: usize,
    pub scores: [f64; 3],
    pub total: f64,
}

impl PrunedRecord {
    pub fn new<F: Scalar>(id: &str, pruned: &PrunedGraph<F>) -> Self {
        Self {
            id: id.to_string(),
            k: pruned.k,
            kept: pruned
                .kept
                .iter()
                .map(|s| PrunedRow {
                    s: s.triple.subject.id().to_string(),
                    r: s.triple.relation.to_string(),
                    o: s.triple.object.id().to_string(),
                    index: s.triple.index,
                    scores: s.channel_scores.map(Scalar::to_f64_lossy),
                    total: s.total.to_f64_lossy(),
                })
                .collect(),
        }
    }

    pub fn to_pruned(&self, source_size: usize) -> Result<PrunedGraph<f64>, crate::kg::GraphError> {
        let kept = self
            .kept
            .iter()
            .map(|row| {
                Ok(ScoredTriple {
                    triple: Triple::from_strs(&row.s, &row.r, &row.o, row.index)?,
                    channel_scores: row.scores,
                    total: row.total,
                })
            })
            .collect::<Result<Vec<_>, crate::kg::GraphError>>()?;
        Ok(PrunedGraph { kept, k: self.k, source_size })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{embed_reference, ReferenceEmbedder};
    use crate::kg::load_graph;
    use std::sync::Arc;

    fn cache() -> EmbeddingCache<f64> {
        EmbeddingCache::new(Arc::new(ReferenceEmbedder::default()))
    }

    fn t(s: &str, r: &str, o: &str, i: usize) -> Triple {
        Triple::from_strs(s, r, o, i).unwrap()
    }

    #[test]
    fn masked_renderings() {
        let tr = t("Beijing", "located_in", "China", 0);
        assert_eq!(render_masked(&tr, MaskChannel::HeadMasked), "[MASK] located in China");
        assert_eq!(render_masked(&tr, MaskChannel::TailMasked), "Beijing located in [MASK]");
        assert_eq!(render_masked(&tr, MaskChannel::BothMasked), "[MASK] located in [MASK]");
    }

    #[test]
    fn closer_triple_scores_higher() {
        let g =
            load_graph(vec![vec!["Paris", "capital_of", "France"], vec!["Berlin", "capital_of", "Germany"]]).unwrap();
        let scored = score_graph(&g, &["capital of France".to_string()], &cache()).unwrap();
        assert!(scored[0].total > scored[1].total);
    }

    #[test]
    fn empty_query_contributes_nothing() {
        let g = load_graph(vec![vec!["Paris", "capital_of", "France"], vec!["a", "b", "c"]]).unwrap();
        let c = cache();
        let with = score_graph(&g, &["capital of France".into(), String::new()], &c).unwrap();
        let without = score_graph(&g, &["capital of France".into()], &c).unwrap();
        for (a, b) in with.iter().zip(&without) {
            assert_eq!(a.channel_scores, b.channel_scores);
        }
    }

    #[test]
    fn nine_terms_for_three_queries() {
        let g = load_graph(vec![vec!["Paris", "capital_of", "France"]]).unwrap();
        let queries: Vec<String> =
            ["capital of France", "Paris", "what country"].iter().map(|s| s.to_string()).collect();
        let scored = score_graph(&g, &queries, &cache()).unwrap();
        let masked = ["[MASK] capital of France", "Paris capital of [MASK]", "[MASK] capital of [MASK]"];
        let mut expected = 0.0;
        for m in masked {
            for q in &queries {
                let a = embed_reference::<f64>(q);
                let b = embed_reference::<f64>(m);
                expected += a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        assert!((scored[0].total - expected).abs() < 1e-12);
        let sum: f64 = scored[0].channel_scores.iter().sum();
        assert!((scored[0].total - sum).abs() < 1e-15);
    }

    #[test]
    fn scoring_needs_queries() {
        let g = load_graph(vec![vec!["a", "b", "c"]]).unwrap();
        assert!(matches!(score_graph(&g, &[], &cache()), Err(PruneError::NoQueries)));
    }

    fn scored(totals: &[(usize, f64)]) -> Vec<ScoredTriple<f64>> {
        totals
            .iter()
            .map(|&(i, s)| ScoredTriple {
                triple: t("a", "r", &format!("o{i}"), i),
                channel_scores: [s, 0.0, 0.0],
                total: s,
            })
            .collect()
    }

    #[test]
    fn top_k_keeps_all_when_large() {
        let p = select_top_k(scored(&[(0, 0.1), (1, 0.5), (2, 0.3)]), 10).unwrap();
        assert_eq!(p.kept.len(), 3);
        assert_eq!(p.source_size, 3);
        let order: Vec<_> = p.kept.iter().map(|s| s.triple.index).collect();
        assert_eq!(order, vec![1, 2, 0]);
    }

    #[test]
    fn top_k_tie_break() {
        let p = select_top_k(scored(&[(5, 0.5), (2, 0.5)]), 1).unwrap();
        assert_eq!(p.kept[0].triple.index, 2);
        assert!(matches!(select_top_k(scored(&[(0, 1.0)]), 0), Err(PruneError::ZeroK)));
    }

    #[test]
    fn coverage_ratio() {
        let p = select_top_k(scored(&[(0, 1.0), (1, 0.5)]), 1).unwrap();
        let c: f64 = answer_coverage(&p, &["o0".into(), "o1".into()]).unwrap();
        assert_eq!(c, 0.5);
        let all = select_top_k(scored(&[(0, 1.0), (1, 0.5)]), 5).unwrap();
        assert_eq!(answer_coverage::<f64>(&all, &["O0".into(), "o1".into()]).unwrap(), 1.0);
        assert!(matches!(answer_coverage::<f64>(&all, &[]), Err(PruneError::NoGold)));
    }

    #[test]
    fn contributions_normalize() {
        let c = channel_contributions(&[0.1f64, 0.1, 0.2]);
        assert!((c[0] - 0.25).abs() < 1e-12);
        assert!((c[1] - 0.25).abs() < 1e-12);
        assert!((c[2] - 0.5).abs() < 1e-12);
        assert_eq!(channel_contributions(&[0.0f64, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn reciprocal_rank_of_third() {
        // Vanilla mode: the answer triple shares one token with the question,
        // two distractors share more.
        let g = load_graph(vec![
            vec!["alpha beta", "gamma", "delta"],
            vec!["alpha beta", "gamma", "x"],
            vec!["alpha", "zz", "yy"],
        ])
        .unwrap();
        let q = vec!["alpha beta gamma delta".to_string()];
        let answers: BTreeSet<usize> = [2].into_iter().collect();
        let c = cache();
        let rank = best_answer_rank(&g, &q, &answers, &RankingMode::Vanilla, &c).unwrap();
        assert_eq!(rank, Some(3));
        let mrr: f64 = channel_mrr(&g, &q, &answers, &RankingMode::Vanilla, &c).unwrap();
        assert!((mrr - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pruned_record_round_trip() {
        let g = load_graph(vec![vec!["a", "r.x", "b"], vec!["c", "r", "d"]]).unwrap();
        let p = prune(&g, &["a r".to_string()], &cache(), 5).unwrap();
        let rec = PrunedRecord::new("q", &p);
        let back = rec.to_pruned(2).unwrap();
        assert_eq!(back, p);
    }
}
