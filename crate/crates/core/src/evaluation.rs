//! Answer metrics and graph-quality metrics.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::answering::{normalize_answer, AnswerSet};
use crate::embedding::{euclidean, similarity, EmbeddingCache, EmbeddingError};
use crate::kg::{group_by_endpoints, textualize_triple, GroupMode, Triple, TripleKey};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("gold answer list is empty")]
    EmptyGold,
    #[error("graph is empty")]
    EmptyGraph,
    #[error("scorer returned {0}, outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("scorer failed: {0}")]
    Scorer(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn gold_set(gold: &[String]) -> Result<HashSet<String>, EvalError> {
    let set: HashSet<String> = gold.iter().map(|g| normalize_answer(g)).filter(|g| !g.is_empty()).collect();
    if set.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    Ok(set)
}

fn pred_set(pred: &AnswerSet) -> HashSet<String> {
    pred.answers.iter().map(|a| normalize_answer(a)).filter(|a| !a.is_empty()).collect()
}

/// 1 when any predicted answer matches any gold answer after normalization.
pub fn hits_at_1(pred: &AnswerSet, gold: &[String]) -> Result<u8, EvalError> {
    let gold = gold_set(gold)?;
    Ok(u8::from(pred_set(pred).iter().any(|p| gold.contains(p))))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf1<F> {
    pub precision: F,
    pub recall: F,
    pub f1: F,
    pub exact_set_match: u8,
}

pub fn prf1<F: Scalar>(pred: &AnswerSet, gold: &[String]) -> Result<Prf1<F>, EvalError> {
    let gold = gold_set(gold)?;
    let pred = pred_set(pred);
    let inter = F::from_usize_lossy(pred.intersection(&gold).count());
    let precision = if pred.is_empty() { F::zero() } else { inter / F::from_usize_lossy(pred.len()) };
    let recall = inter / F::from_usize_lossy(gold.len());
    let f1 = if precision + recall == F::zero() {
        F::zero()
    } else {
        (F::one() + F::one()) * precision * recall / (precision + recall)
    };
    Ok(Prf1 { precision, recall, f1, exact_set_match: u8::from(pred == gold) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionEval {
    pub hit: u8,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(rename = "exactSetMatch")]
    pub exact_set_match: u8,
}

pub const F1_AVERAGING: &str = "macro";
pub const ACC_NOTE: &str = "acc is the mean exact set match between predicted and gold answers";

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub hits1: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub acc: f64,
    pub n: usize,
    pub per_question: BTreeMap<String, QuestionEval>,
    pub f1_averaging: String,
    pub notes: Vec<String>,
}

pub struct EvalInput<'a> {
    pub id: &'a str,
    pub pred: &'a AnswerSet,
    pub gold: &'a [String],
}

pub fn evaluate_question(pred: &AnswerSet, gold: &[String]) -> Result<QuestionEval, EvalError> {
    let p = prf1::<f64>(pred, gold)?;
    Ok(QuestionEval {
        hit: hits_at_1(pred, gold)?,
        precision: p.precision,
        recall: p.recall,
        f1: p.f1,
        exact_set_match: p.exact_set_match,
    })
}

/// Per-question metrics in parallel, aggregated in ascending id order.
pub fn evaluate(inputs: &[EvalInput<'_>]) -> Result<EvalReport, EvalError> {
    let rows: Vec<(String, QuestionEval)> = inputs
        .par_iter()
        .map(|i| evaluate_question(i.pred, i.gold).map(|e| (i.id.to_string(), e)))
        .collect::<Result<_, _>>()?;
    Ok(aggregate(rows.into_iter().collect()))
}

pub fn aggregate(per_question: BTreeMap<String, QuestionEval>) -> EvalReport {
    let n = per_question.len();
    let mean = |f: &dyn Fn(&QuestionEval) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_question.values().map(f).sum::<f64>() / n as f64
        }
    };
    EvalReport {
        hits1: mean(&|q| f64::from(q.hit)),
        f1: mean(&|q| q.f1),
        precision: mean(&|q| q.precision),
        recall: mean(&|q| q.recall),
        acc: mean(&|q| f64::from(q.exact_set_match)),
        n,
        f1_averaging: F1_AVERAGING.to_string(),
        notes: vec![ACC_NOTE.to_string()],
        per_question,
    }
}

// ---------------------------------------------------------------------------
// Graph quality
// ---------------------------------------------------------------------------

/// Mean and raw sum of a per-triple (or per-pair) quantity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSum<F> {
    pub mean: F,
    pub sum: F,
}

/// Similarity between the question and each textualized triple.
pub fn relevance_score<F: Scalar>(
    question: &str,
    graph: &[Triple],
    cache: &EmbeddingCache<F>,
) -> Result<MeanSum<F>, EvalError> {
    if graph.is_empty() {
        return Err(EvalError::EmptyGraph);
    }
    let q = cache.embed(question)?;
    let texts: Vec<String> = graph.iter().map(textualize_triple).collect();
    let vecs = cache.embed_batch(&texts)?;
    let mut sum = F::zero();
    for v in &vecs {
        sum += similarity(&q, v)?;
    }
    Ok(MeanSum { mean: sum / F::from_usize_lossy(graph.len()), sum })
}

/// Plausibility of a triple in `[0, 1]`.
pub trait TripleScorer: Send + Sync {
    fn score_batch(&self, triples: &[Triple]) -> Result<Vec<f64>, EvalError>;
}

pub struct ConstantScorer(pub f64);

impl TripleScorer for ConstantScorer {
    fn score_batch(&self, triples: &[Triple]) -> Result<Vec<f64>, EvalError> {
        Ok(vec![self.0; triples.len()])
    }
}

/// Fixed scores per `(s, r, o)`, with a default for unlisted triples.
#[derive(Clone, Debug, Default)]
pub struct TableScorer {
    pub scores: std::collections::HashMap<TripleKey, f64>,
    pub default: f64,
}

impl TripleScorer for TableScorer {
    fn score_batch(&self, triples: &[Triple]) -> Result<Vec<f64>, EvalError> {
        Ok(triples.iter().map(|t| self.scores.get(&t.key()).copied().unwrap_or(self.default)).collect())
    }
}

/// Posts `{"triples": [[s, r, o], ...]}` and reads `{"scores": [...]}`.
pub struct RemoteScorer {
    endpoint: String,
    agent: ureq::Agent,
}

impl RemoteScorer {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(60))).build().into();
        Self { endpoint: endpoint.into(), agent }
    }
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

impl TripleScorer for RemoteScorer {
    fn score_batch(&self, triples: &[Triple]) -> Result<Vec<f64>, EvalError> {
        let body = serde_json::json!({
            "triples": triples
                .iter()
                .map(|t| [t.subject.id(), t.relation.as_str(), t.object.id()])
                .collect::<Vec<_>>(),
        });
        let resp: ScoreResponse = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| EvalError::Scorer(e.to_string()))?;
        if resp.scores.len() != triples.len() {
            return Err(EvalError::Scorer(format!("expected {} scores, got {}", triples.len(), resp.scores.len())));
        }
        Ok(resp.scores)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KgcScorerSpec {
    ConstantStub { value: f64 },
    Remote { endpoint: String },
}

impl Default for KgcScorerSpec {
    fn default() -> Self {
        KgcScorerSpec::ConstantStub { value: 1.0 }
    }
}

impl KgcScorerSpec {
    pub fn build(&self) -> Box<dyn TripleScorer> {
        match self {
            KgcScorerSpec::ConstantStub { value } => Box::new(ConstantScorer(*value)),
            KgcScorerSpec::Remote { endpoint } => Box::new(RemoteScorer::new(endpoint.clone())),
        }
    }
}

/// Mean plausibility over all triples. With `threshold`, triples scoring
/// below it contribute zero.
pub fn semantic_richness<F: Scalar>(
    graph: &[Triple],
    scorer: &dyn TripleScorer,
    threshold: Option<f64>,
) -> Result<MeanSum<F>, EvalError> {
    if graph.is_empty() {
        return Err(EvalError::EmptyGraph);
    }
    let scores = scorer.score_batch(graph)?;
    if scores.len() != graph.len() {
        return Err(EvalError::Scorer(format!("expected {} scores, got {}", graph.len(), scores.len())));
    }
    let mut sum = F::zero();
    for s in scores {
        if !(0.0..=1.0).contains(&s) {
            return Err(EvalError::ScoreOutOfRange(s));
        }
        if threshold.is_none_or(|th| s >= th) {
            sum += F::from_f64_lossy(s);
        }
    }
    Ok(MeanSum { mean: sum / F::from_usize_lossy(graph.len()), sum })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Redundancy<F> {
    /// Mean relation similarity over unordered pairs within groups.
    pub mean: F,
    /// Double sum over all ordered member pairs of every group, diagonal
    /// included.
    pub sum: F,
    pub groups: usize,
    pub pairs: usize,
}

/// Relation similarity within endpoint groups.
pub fn redundancy_score<F: Scalar>(
    graph: &[Triple],
    cache: &EmbeddingCache<F>,
    mode: GroupMode,
) -> Result<Redundancy<F>, EvalError> {
    let groups = group_by_endpoints(graph, mode);
    let mut out = Redundancy { mean: F::zero(), sum: F::zero(), groups: groups.len(), pairs: 0 };
    let mut pair_sum = F::zero();
    for group in &groups {
        let texts: Vec<String> = group.iter().map(|t| t.relation.text()).collect();
        let vecs = cache.embed_batch(&texts)?;
        for i in 0..vecs.len() {
            out.sum += similarity(&vecs[i], &vecs[i])?;
            for j in i + 1..vecs.len() {
                let s = similarity(&vecs[i], &vecs[j])?;
                pair_sum += s;
                out.sum += s + s;
                out.pairs += 1;
            }
        }
    }
    if out.pairs > 0 {
        out.mean = pair_sum / F::from_usize_lossy(out.pairs);
    }
    Ok(out)
}

/// Pair-mean of relation similarity inside a single group.
pub fn group_pair_mean<F: Scalar>(relations: &[&str], cache: &EmbeddingCache<F>) -> Result<Option<F>, EvalError> {
    let vecs = cache.embed_batch(relations)?;
    let mut sum = F::zero();
    let mut n = 0usize;
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            sum += similarity(&vecs[i], &vecs[j])?;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / F::from_usize_lossy(n)))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphQualityReport {
    pub relevance: MeanSum<f64>,
    #[serde(rename = "semanticRichness")]
    pub semantic_richness: MeanSum<f64>,
    pub redundancy: MeanSum<f64>,
    pub triples: usize,
    pub groups: usize,
    pub pairs: usize,
}

pub struct QualityOptions<'a> {
    pub scorer: &'a dyn TripleScorer,
    pub threshold: Option<f64>,
    pub mode: GroupMode,
}

pub fn graph_quality(
    question: &str,
    graph: &[Triple],
    cache: &EmbeddingCache<f64>,
    opts: &QualityOptions<'_>,
) -> Result<GraphQualityReport, EvalError> {
    let red = redundancy_score(graph, cache, opts.mode)?;
    Ok(GraphQualityReport {
        relevance: relevance_score(question, graph, cache)?,
        semantic_richness: semantic_richness(graph, opts.scorer, opts.threshold)?,
        redundancy: MeanSum { mean: red.mean, sum: red.sum },
        triples: graph.len(),
        groups: red.groups,
        pairs: red.pairs,
    })
}

/// Mean of per-question reports; counts are summed.
pub fn average_quality(reports: &[GraphQualityReport]) -> GraphQualityReport {
    let mut out = GraphQualityReport::default();
    if reports.is_empty() {
        return out;
    }
    for r in reports {
        out.relevance.mean += r.relevance.mean;
        out.relevance.sum += r.relevance.sum;
        out.semantic_richness.mean += r.semantic_richness.mean;
        out.semantic_richness.sum += r.semantic_richness.sum;
        out.redundancy.mean += r.redundancy.mean;
        out.redundancy.sum += r.redundancy.sum;
        out.triples += r.triples;
        out.groups += r.groups;
        out.pairs += r.pairs;
    }
    let n = reports.len() as f64;
    for m in [&mut out.relevance, &mut out.semantic_richness, &mut out.redundancy] {
        m.mean /= n;
        m.sum /= n;
    }
    out
}

/// One row of the quality export, with the triples behind it.
pub struct QualityExport<'a> {
    pub dataset: &'a str,
    pub variant: &'a str,
    pub report: &'a GraphQualityReport,
    pub triples: &'a [Triple],
}

pub const QUALITY_CSV: &str = "quality.csv";
pub const EMBEDDINGS_JSONL: &str = "embeddings.jsonl";
pub const DISTANCES_CSV: &str = "distances.csv";

#[derive(Serialize)]
struct EmbeddingDump<'a> {
    dataset: &'a str,
    variant: &'a str,
    index: usize,
    text: &'a str,
    vector: &'a [f64],
}

/// Writes `quality.csv`, one embedding line per triple, and the pairwise
/// euclidean distances between triple embeddings of each variant.
pub fn export_quality_report(
    rows: &[QualityExport<'_>],
    dir: &Path,
    cache: &EmbeddingCache<f64>,
) -> Result<(), EvalError> {
    fs::create_dir_all(dir)?;
    let mut csv = BufWriter::new(fs::File::create(dir.join(QUALITY_CSV))?);
    let mut emb = BufWriter::new(fs::File::create(dir.join(EMBEDDINGS_JSONL))?);
    let mut dist = BufWriter::new(fs::File::create(dir.join(DISTANCES_CSV))?);
    writeln!(csv, "dataset,variant,relevance,semanticRichness,redundancy")?;
    writeln!(dist, "dataset,variant,i,j,distance")?;
    for row in rows {
        writeln!(
            csv,
            "{},{},{},{},{}",
            row.dataset,
            row.variant,
            row.report.relevance.mean,
            row.report.semantic_richness.mean,
            row.report.redundancy.mean
        )?;
        let texts: Vec<String> = row.triples.iter().map(textualize_triple).collect();
        let vecs = cache.embed_batch(&texts)?;
        for (i, (text, v)) in texts.iter().zip(&vecs).enumerate() {
            let line = EmbeddingDump { dataset: row.dataset, variant: row.variant, index: i, text, vector: v.values() };
            serde_json::to_writer(&mut emb, &line).map_err(std::io::Error::other)?;
            writeln!(emb)?;
        }
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                writeln!(dist, "{},{},{i},{j},{}", row.dataset, row.variant, euclidean(&vecs[i], &vecs[j])?)?;
            }
        }
    }
    csv.flush()?;
    emb.flush()?;
    dist.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ReferenceEmbedder;
    use std::sync::Arc;

    fn set(xs: &[&str]) -> AnswerSet {
        AnswerSet::from_answers(xs)
    }

    fn gold(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn t(s: &str, r: &str, o: &str) -> Triple {
        Triple::from_strs(s, r, o, 0).unwrap()
    }

    fn cache() -> EmbeddingCache<f64> {
        EmbeddingCache::new(Arc::new(ReferenceEmbedder::default()))
    }

    #[test]
    fn hits_examples() {
        assert_eq!(hits_at_1(&set(&["euro"]), &gold(&["Euro"])).unwrap(), 1);
        assert_eq!(hits_at_1(&set(&[]), &gold(&["x"])).unwrap(), 0);
        assert_eq!(hits_at_1(&set(&["a", "b"]), &gold(&["c", "b"])).unwrap(), 1);
        assert!(matches!(hits_at_1(&set(&["a"]), &[]), Err(EvalError::EmptyGold)));
    }

    #[test]
    fn prf1_examples() {
        let p = prf1::<f64>(&set(&["a", "b"]), &gold(&["b", "c"])).unwrap();
        assert_eq!((p.precision, p.recall, p.f1, p.exact_set_match), (0.5, 0.5, 0.5, 0));
        let p = prf1::<f64>(&set(&["a", "b"]), &gold(&["b", "a"])).unwrap();
        assert_eq!((p.precision, p.recall, p.f1, p.exact_set_match), (1.0, 1.0, 1.0, 1));
        let p = prf1::<f64>(&set(&[]), &gold(&["x"])).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn aggregate_means() {
        let a = set(&["a"]);
        let b = set(&["z"]);
        let g = gold(&["a"]);
        let r = evaluate(&[EvalInput { id: "q2", pred: &b, gold: &g }, EvalInput { id: "q1", pred: &a, gold: &g }])
            .unwrap();
        assert_eq!(r.n, 2);
        assert_eq!(r.hits1, 0.5);
        assert_eq!(r.acc, 0.5);
        assert_eq!(r.per_question.keys().collect::<Vec<_>>(), vec!["q1", "q2"]);
        let json = serde_json::to_value(&r).unwrap();
        for k in ["hits1", "f1", "precision", "recall", "acc", "n", "per_question"] {
            assert!(json.get(k).is_some(), "{k}");
        }
        assert!(json["per_question"]["q1"].get("exactSetMatch").is_some());
    }

    #[test]
    fn relevance_examples() {
        let c = cache();
        let tr = t("Paris", "capital_of", "France");
        let q = textualize_triple(&tr);
        let r = relevance_score(&q, std::slice::from_ref(&tr), &c).unwrap();
        assert!((r.mean - 1.0).abs() < 1e-12);

        let dup = relevance_score(&q, &[tr.clone(), tr.clone()], &c).unwrap();
        assert!((dup.mean - r.mean).abs() < 1e-12);
        assert!((dup.sum - 2.0 * r.sum).abs() < 1e-12);

        assert!(matches!(relevance_score(&q, &[], &c), Err(EvalError::EmptyGraph)));
    }

    #[test]
    fn relevance_disjoint_tokens_is_zero() {
        let e = ReferenceEmbedder::default();
        let tr = t("Paris", "capital_of", "France");
        let q = "zebra quantum";
        let qs: HashSet<_> = crate::embedding::tokenize(q).iter().map(|w| e.slot(w)).collect();
        let ts: HashSet<_> = crate::embedding::tokenize(&textualize_triple(&tr)).iter().map(|w| e.slot(w)).collect();
        assert!(qs.is_disjoint(&ts));
        assert_eq!(relevance_score(q, &[tr], &cache()).unwrap().mean, 0.0);
    }

    #[test]
    fn richness_examples() {
        let g = vec![t("a", "r", "b"), t("c", "r", "d")];
        assert!((semantic_richness::<f64>(&g, &ConstantScorer(0.7), None).unwrap().mean - 0.7).abs() < 1e-12);
        let mut table = TableScorer::default();
        table.scores.insert(g[0].key(), 0.2);
        table.scores.insert(g[1].key(), 0.8);
        assert!((semantic_richness::<f64>(&g, &table, None).unwrap().mean - 0.5).abs() < 1e-12);
        assert!((semantic_richness::<f64>(&g, &table, Some(0.5)).unwrap().mean - 0.4).abs() < 1e-12);
        assert!(matches!(semantic_richness::<f64>(&g, &ConstantScorer(1.5), None), Err(EvalError::ScoreOutOfRange(_))));
    }

    #[test]
    fn redundancy_examples() {
        let c = cache();
        let singles = vec![t("a", "r", "b"), t("c", "r", "d")];
        assert_eq!(redundancy_score(&singles, &c, GroupMode::HeadAndTail).unwrap().mean, 0.0);

        let twins = vec![t("a", "born_in", "b"), t("a", "born_in", "b")];
        assert!((redundancy_score(&twins, &c, GroupMode::HeadAndTail).unwrap().mean - 1.0).abs() < 1e-12);

        let trio = vec![t("a", "born_in", "b"), t("a", "born_in", "b"), t("a", "lives", "b")];
        let red = redundancy_score(&trio, &c, GroupMode::HeadAndTail).unwrap();
        let vr = c.embed("born in").unwrap();
        let vs = c.embed("lives").unwrap();
        let x = similarity(&vr, &vs).unwrap();
        assert_eq!(red.pairs, 3);
        assert!((red.mean - (1.0 + 2.0 * x) / 3.0).abs() < 1e-12);
        assert!((red.sum - (3.0 + 2.0 * (1.0 + 2.0 * x))).abs() < 1e-12);
    }

    #[test]
    fn duplicate_insertion_can_lower_pair_mean() {
        // {y, y, y, x} with x orthogonal to y: pairs 3 of 1.0 and 3 of 0.0.
        // Adding another x gives 4 of 1.0 over 10 pairs.
        let c = cache();
        let before = group_pair_mean(&["born", "born", "born", "lives"], &c).unwrap().unwrap();
        let after = group_pair_mean(&["born", "born", "born", "lives", "lives"], &c).unwrap().unwrap();
        assert!((before - 0.5).abs() < 1e-12);
        assert!((after - 0.4).abs() < 1e-12);
    }

    #[test]
    fn export_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = cache();
        let g = vec![t("a", "r", "b"), t("b", "r", "c"), t("c", "s", "d")];
        let rep = GraphQualityReport::default();
        let rows = [
            QualityExport { dataset: "fx", variant: "full", report: &rep, triples: &g },
            QualityExport { dataset: "fx", variant: "pruned", report: &rep, triples: &g[..2] },
        ];
        export_quality_report(&rows, dir.path(), &c).unwrap();
        let csv = fs::read_to_string(dir.path().join(QUALITY_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let dist = fs::read_to_string(dir.path().join(DISTANCES_CSV)).unwrap();
        assert_eq!(dist.lines().count(), 1 + 3 + 1);
        let emb = fs::read_to_string(dir.path().join(EMBEDDINGS_JSONL)).unwrap();
        assert_eq!(emb.lines().count(), 5);

        export_quality_report(&[], dir.path(), &c).unwrap();
        let csv = fs::read_to_string(dir.path().join(QUALITY_CSV)).unwrap();
        assert_eq!(csv, "dataset,variant,relevance,semanticRichness,redundancy\n");
    }
}
