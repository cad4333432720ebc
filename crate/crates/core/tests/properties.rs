//! Property tests against brute-force oracles written independently of the
//! library code.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use eog_core::answering::AnswerSet;
use eog_core::embedding::{EmbeddingCache, ReferenceEmbedder};
use eog_core::evaluation::{prf1, redundancy_score, relevance_score, semantic_richness, ConstantScorer};
use eog_core::kg::{extract_paths, load_graph, GroupMode, HopLimit, KnowledgeGraph, Path, Triple};
use eog_core::llm::estimate_tokens;
use eog_core::pruning::{prune, score_graph};
use eog_core::query::parse_decomposition_tree;
use proptest::prelude::*;

// ---------------------------------------------------------------------------
// Oracle embedder: sparse token counts, similarity = Σ c_a c_b / (|a| |b|).
// ---------------------------------------------------------------------------

fn oracle_hash(token: &str) -> u64 {
    let mut h: u64 = 14695981039346656037;
    for &b in token.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(1099511628211);
    }
    h
}

fn oracle_counts(text: &str) -> BTreeMap<u64, u64> {
    let mut m = BTreeMap::new();
    let mut word = String::new();
    for ch in text.chars().chain(std::iter::once(' ')) {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else if !word.is_empty() {
            *m.entry(oracle_hash(&word) % 256).or_insert(0) += 1;
            word.clear();
        }
    }
    m
}

fn oracle_sim(a: &str, b: &str) -> f64 {
    let (ca, cb) = (oracle_counts(a), oracle_counts(b));
    let na: u64 = ca.values().map(|c| c * c).sum();
    let nb: u64 = cb.values().map(|c| c * c).sum();
    if na == 0 || nb == 0 {
        return 0.0;
    }
    let dot: u64 = ca.iter().filter_map(|(k, v)| cb.get(k).map(|w| v * w)).sum();
    dot as f64 / ((na as f64).sqrt() * (nb as f64).sqrt())
}

fn oracle_score(t: &[String; 3], queries: &[String]) -> f64 {
    let views =
        [format!("[MASK] {} {}", t[1], t[2]), format!("{} {} [MASK]", t[0], t[1]), format!("[MASK] {} [MASK]", t[1])];
    let mut total = 0.0;
    for v in &views {
        for q in queries {
            total += oracle_sim(q, v);
        }
    }
    total
}

fn cache() -> EmbeddingCache<f64> {
    EmbeddingCache::new(Arc::new(ReferenceEmbedder::default()))
}

const WORDS: &[&str] = &[
    "paris", "france", "capital", "river", "seine", "king", "queen", "born", "city", "language", "spanish", "chile",
    "currency", "euro", "team", "player", "film", "director", "author", "book",
];
const RELS: &[&str] = &[
    "location.country.capital",
    "people.person.nationality",
    "film.film.directed_by",
    "book.written_work.author",
    "location.country.currency_used",
    "sports.pro_athlete.teams",
    "common.topic.notable_for",
];

fn entity() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS), 1..3).prop_map(|w| {
        w.iter()
            .map(|s| {
                let mut c = s.chars();
                c.next().map(|f| f.to_uppercase().collect::<String>() + c.as_str()).unwrap_or_default()
            })
            .collect::<Vec<_>>()
            .join(" ")
    })
}

fn triple_rows(max: usize) -> impl Strategy<Value = Vec<[String; 3]>> {
    prop::collection::vec((entity(), prop::sample::select(RELS), entity()), 1..max)
        .prop_map(|v| v.into_iter().map(|(s, r, o)| [s, r.to_string(), o]).collect())
}

fn query() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS), 1..8).prop_map(|w| w.join(" ") + "?")
}

fn graph(rows: &[[String; 3]]) -> KnowledgeGraph {
    load_graph(rows.iter().map(|r| r.to_vec())).unwrap()
}

/// Checks a pruned ranking against oracle scores: same totals, sorted by
/// score then index, and nothing left out scores above what was kept.
pub fn check_against_oracle(
    g: &KnowledgeGraph,
    queries: &[String],
    k: usize,
    kept: &[(usize, f64)],
) -> Result<(), String> {
    let oracle: BTreeMap<usize, f64> = g
        .triples()
        .iter()
        .map(|t| {
            let row = [t.subject.id().to_string(), t.relation.as_str().to_string(), t.object.id().to_string()];
            (t.index, oracle_score(&row, queries))
        })
        .collect();
    if kept.len() != k.min(g.len()) {
        return Err(format!("kept {} of {}, k={k}", kept.len(), g.len()));
    }
    for &(idx, total) in kept {
        if (oracle[&idx] - total).abs() > 1e-9 {
            return Err(format!("triple {idx}: score {total} vs oracle {}", oracle[&idx]));
        }
    }
    for w in kept.windows(2) {
        let (a, b) = (w[0], w[1]);
        if oracle[&a.0] < oracle[&b.0] - 1e-9 {
            return Err(format!("{} ranked above higher-scoring {}", a.0, b.0));
        }
        if (oracle[&a.0] - oracle[&b.0]).abs() <= 1e-9 && a.1 == b.1 && a.0 > b.0 {
            return Err(format!("tie between {} and {} not broken by index", a.0, b.0));
        }
    }
    let kept_set: HashSet<usize> = kept.iter().map(|k| k.0).collect();
    if let Some(floor) = kept.iter().map(|k| oracle[&k.0]).reduce(f64::min) {
        for (idx, s) in &oracle {
            if !kept_set.contains(idx) && *s > floor + 1e-9 {
                return Err(format!("dropped {idx} scoring {s} above kept floor {floor}"));
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pruning_matches_oracle(rows in triple_rows(120), queries in prop::collection::vec(query(), 1..=5), k in 1usize..150) {
        let g = graph(&rows);
        let pruned = prune(&g, &queries, &cache(), k).unwrap();
        let kept: Vec<(usize, f64)> = pruned.kept.iter().map(|s| (s.triple.index, s.total)).collect();
        prop_assert_eq!(check_against_oracle(&g, &queries, k, &kept), Ok(()));
    }

    #[test]
    fn channel_scores_sum_to_total(rows in triple_rows(40), queries in prop::collection::vec(query(), 1..=3)) {
        for s in score_graph(&graph(&rows), &queries, &cache()).unwrap() {
            let sum: f64 = s.channel_scores.iter().sum();
            prop_assert!((sum - s.total).abs() < 1e-12);
        }
    }

    #[test]
    fn pruned_graph_is_subset_in_score_order(rows in triple_rows(60), q in query(), k in 1usize..80) {
        let g = graph(&rows);
        let pruned = prune(&g, &[q], &cache(), k).unwrap();
        let all: HashSet<usize> = g.triples().iter().map(|t| t.index).collect();
        prop_assert!(pruned.kept.iter().all(|s| all.contains(&s.triple.index)));
        prop_assert!(pruned.kept.windows(2).all(|w| w[0].total >= w[1].total));
    }

    #[test]
    fn batch_embedding_equals_single(texts in prop::collection::vec(query(), 1..20)) {
        let batch = cache().embed_batch(&texts).unwrap();
        let single = cache();
        for (t, v) in texts.iter().zip(&batch) {
            let one = single.embed(t).unwrap();
            prop_assert_eq!(one.values(), v.values());
        }
    }

    #[test]
    fn reference_similarity_matches_oracle(a in query(), b in query()) {
        let c = cache();
        let s = eog_core::embedding::similarity(&c.embed(&a).unwrap(), &c.embed(&b).unwrap()).unwrap();
        prop_assert!((s - oracle_sim(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn paths_match_brute_force(rows in triple_rows(40)) {
        let g = graph(&rows);
        let paths = extract_paths(&g, HopLimit::Two);
        let t = g.triples();
        let mut expected: Vec<String> = t.iter().map(|a| a.compact()).collect();
        for a in t {
            for b in t {
                if a.object.id() == b.subject.id() {
                    expected.push(format!("{}->{}", a.compact(), b.compact()));
                }
            }
        }
        let got: Vec<String> = paths.iter().map(Path::compact).collect();
        prop_assert_eq!(got, expected);
        let one = extract_paths(&g, HopLimit::One);
        prop_assert_eq!(one.len(), g.len());
    }

    #[test]
    fn tree_round_trip(tree in decomposition_tree()) {
        let parsed = parse_decomposition_tree(&tree).unwrap();
        prop_assert_eq!(parsed.serialize(), tree);
    }

    #[test]
    fn prf1_matches_set_oracle(pred in prop::collection::vec("[a-e]{1,2}", 0..50), gold in prop::collection::vec("[a-e]{1,2}", 1..50)) {
        let p = prf1::<f64>(&AnswerSet::from_answers(&pred), &gold).unwrap();
        let (ps, gs) = oracle_prf1(&pred, &gold);
        prop_assert_eq!((p.precision, p.recall, p.f1, p.exact_set_match), (ps.0, ps.1, ps.2, gs));
    }

    #[test]
    fn metrics_bounded_and_order_free(rows in triple_rows(60), q in query(), seed in any::<u64>()) {
        let c = cache();
        let triples: Vec<Triple> = graph(&rows).triples().to_vec();
        let mut shuffled = triples.clone();
        shuffle(&mut shuffled, seed);
        let rel = relevance_score(&q, &triples, &c).unwrap();
        let rel2 = relevance_score(&q, &shuffled, &c).unwrap();
        prop_assert!((0.0..=1.0).contains(&rel.mean));
        prop_assert!((rel.mean - rel2.mean).abs() < 1e-9);
        for mode in [GroupMode::HeadAndTail, GroupMode::Head, GroupMode::Tail] {
            let a = redundancy_score(&triples, &c, mode).unwrap();
            let b = redundancy_score(&shuffled, &c, mode).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&a.mean));
            prop_assert!((a.mean - b.mean).abs() < 1e-9);
        }
        let sr = semantic_richness::<f64>(&triples, &ConstantScorer(0.7), None).unwrap();
        prop_assert!((sr.mean - 0.7).abs() < 1e-12);
    }

    #[test]
    fn token_estimate_matches_ceiling(text in ".{0,200}") {
        let bytes = text.len() as u64;
        prop_assert_eq!(estimate_tokens(&text), bytes / 4 + u64::from(!bytes.is_multiple_of(4)));
    }
}

pub fn oracle_prf1(pred: &[String], gold: &[String]) -> ((f64, f64, f64), u8) {
    let norm = |v: &[String]| -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in v {
            let n = s.to_lowercase();
            if !out.contains(&n) {
                out.push(n);
            }
        }
        out
    };
    let (p, g) = (norm(pred), norm(gold));
    let inter = p.iter().filter(|x| g.contains(x)).count() as f64;
    let precision = if p.is_empty() { 0.0 } else { inter / p.len() as f64 };
    let recall = inter / g.len() as f64;
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let exact = p.len() == g.len() && p.iter().all(|x| g.contains(x));
    ((precision, recall, f1), u8::from(exact))
}

fn shuffle<T>(v: &mut [T], mut seed: u64) {
    for i in (1..v.len()).rev() {
        seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        v.swap(i, (seed >> 33) as usize % (i + 1));
    }
}

/// Valid trees of depth at most 5: every line after the root is at depth
/// between 1 and one more than the previous line.
fn decomposition_tree() -> impl Strategy<Value = String> {
    (query(), prop::collection::vec((0usize..6, query()), 0..20)).prop_map(|(root, rest)| {
        let mut lines = vec![root];
        let mut prev = 0usize;
        for (step, text) in rest {
            let depth = (step % (prev + 1) + 1).min(5);
            lines.push(format!("{}{}", "-".repeat(depth), text));
            prev = depth;
        }
        lines.join("\n")
    })
}
