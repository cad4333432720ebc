//! Structure- and feature-driven graph enrichment.
//!
//! The structural prompt pairs each pruned triple with the queries it
//! relates to and lists its 1-hop and 2-hop paths; the provider answers with
//! new triples derived by similarity, symmetry or transitivity. The feature
//! prompt lists every entity with its context; the provider answers with
//! ontology triples drawn from a closed relation vocabulary.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::embedding::{similarity, EmbeddingCache, EmbeddingError};
use crate::kg::{extract_paths, EntityRef, HopLimit, KnowledgeGraph, Triple, TripleKey};
use crate::llm::{render_template, PromptTemplate, TemplateError};
use crate::pruning::PrunedGraph;
use crate::query::Quadruple;
use crate::scalar::Scalar;

pub const DEFAULT_TAU: f64 = 0.3;
pub const DEFAULT_MAX_QUADRUPLES: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    Similarity,
    Symmetry,
    Transitivity,
    Hierarchy,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Closed vocabulary for ontology triples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OntologyRelation {
    HypernymIsA,
    HypernymLocateAt,
    HypernymMannerOf,
    InductionBelongTo,
    InclusionIsPartOf,
    InclusionMadeOf,
    InclusionDerivedFrom,
    InclusionHasContext,
}

impl OntologyRelation {
    pub const ALL: [OntologyRelation; 8] = [
        OntologyRelation::HypernymIsA,
        OntologyRelation::HypernymLocateAt,
        OntologyRelation::HypernymMannerOf,
        OntologyRelation::InductionBelongTo,
        OntologyRelation::InclusionIsPartOf,
        OntologyRelation::InclusionMadeOf,
        OntologyRelation::InclusionDerivedFrom,
        OntologyRelation::InclusionHasContext,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OntologyRelation::HypernymIsA => "Hypernym_isA",
            OntologyRelation::HypernymLocateAt => "Hypernym_locateAt",
            OntologyRelation::HypernymMannerOf => "Hypernym_mannerOf",
            OntologyRelation::InductionBelongTo => "Induction_belongTo",
            OntologyRelation::InclusionIsPartOf => "Inclusion_isPartOf",
            OntologyRelation::InclusionMadeOf => "Inclusion_madeOf",
            OntologyRelation::InclusionDerivedFrom => "Inclusion_derivedFrom",
            OntologyRelation::InclusionHasContext => "Inclusion_hasContext",
        }
    }
}

impl FromStr for OntologyRelation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OntologyRelation::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("{s:?} is not an ontology relation"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnrichedTriple {
    pub triple: Triple,
    pub provenance: Provenance,
    /// Indices of base triples the generated triple was derived from.
    pub source_indices: Vec<usize>,
    /// False when neither endpoint occurs in the base graph.
    pub grounded: bool,
}

impl EnrichedTriple {
    fn parsed(triple: Triple, provenance: Provenance) -> Self {
        Self { triple, provenance, source_indices: Vec::new(), grounded: true }
    }
}

/// Pruned graph plus generated triples, deduplicated on `(s, r, o)`.
#[derive(Clone, Debug)]
pub struct EnrichedGraph<F> {
    pub base: PrunedGraph<F>,
    pub generated: Vec<EnrichedTriple>,
}

impl<F: Scalar> EnrichedGraph<F> {
    /// Base triples in pruned order, then generated triples.
    pub fn merged(&self) -> Vec<Triple> {
        let mut out = self.base.triples();
        out.extend(self.generated.iter().map(|g| g.triple.clone()));
        out
    }

    pub fn len(&self) -> usize {
        self.base.kept.len() + self.generated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// Structural prompt
// ---------------------------------------------------------------------------

/// A kept triple with the queries judged relevant to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Association {
    pub triple: Triple,
    pub queries: Vec<String>,
}

impl Association {
    /// `(s,r,o)-query1-query2...`
    pub fn line(&self) -> String {
        let mut s = self.triple.compact();
        for q in &self.queries {
            s.push('-');
            s.push_str(q);
        }
        s
    }
}

/// Pairs each quadruple (at most `cap`, in the given order) with the queries
/// of Q whose similarity to its graph query exceeds `tau`, followed by the
/// quadruple's own graph query.
pub fn associate_queries<F: Scalar>(
    quads: &[Quadruple],
    queries: &[String],
    cache: &EmbeddingCache<F>,
    tau: F,
    cap: usize,
) -> Result<Vec<Association>, EmbeddingError> {
    let quads = &quads[..quads.len().min(cap)];
    let query_vecs = cache.embed_batch(queries)?;
    let gq: Vec<&str> = quads.iter().map(|q| q.graph_query.as_str()).collect();
    let gq_vecs = cache.embed_batch(&gq)?;
    quads
        .iter()
        .zip(&gq_vecs)
        .map(|(quad, gv)| {
            let mut matched = Vec::new();
            for (q, qv) in queries.iter().zip(&query_vecs) {
                if similarity(qv, gv)? > tau && !matched.contains(q) {
                    matched.push(q.clone());
                }
            }
            if !matched.contains(&quad.graph_query) {
                matched.push(quad.graph_query.clone());
            }
            Ok(Association { triple: quad.triple.clone(), queries: matched })
        })
        .collect()
}

/// Text sections that fill the structural template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuralPayload {
    pub quadruples: String,
    pub one_hop: String,
    pub two_hop: String,
}

pub fn structural_payload(associations: &[Association]) -> StructuralPayload {
    let g = KnowledgeGraph::from_subgraph(associations.iter().map(|a| a.triple.clone()));
    let paths = extract_paths(&g, HopLimit::Two);
    let (two, one): (Vec<_>, Vec<_>) = paths.iter().partition(|p| p.is_two_hop());
    StructuralPayload {
        quadruples: associations.iter().map(Association::line).collect::<Vec<_>>().join("\n"),
        one_hop: one.iter().map(|p| p.compact()).collect::<Vec<_>>().join("\n"),
        two_hop: two.iter().map(|p| p.compact()).collect::<Vec<_>>().join("\n"),
    }
}

pub fn render_structural_prompt(
    template: &PromptTemplate,
    payload: &StructuralPayload,
) -> Result<String, TemplateError> {
    render_template(
        template,
        &[
            ("quadruples", payload.quadruples.as_str()),
            ("1-hop path", payload.one_hop.as_str()),
            ("2-hop path", payload.two_hop.as_str()),
        ],
    )
}

// ---------------------------------------------------------------------------
// Output parsing
// ---------------------------------------------------------------------------

fn paren_group() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([^()]*)\)").expect("valid regex"))
}

/// Splits `"(a, b, c)"` into three trimmed non-empty fields.
pub fn parse_triple_line(line: &str) -> Option<(String, String, String)> {
    let inner = line.trim().strip_prefix('(')?.strip_suffix(')')?;
    split_fields(inner)
}

fn split_fields(inner: &str) -> Option<(String, String, String)> {
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
        return None;
    }
    Some((parts[0].to_string(), parts[1].to_string(), parts[2].to_string()))
}

fn is_markup(line: &str) -> bool {
    let l = line.trim();
    l == "..." || (l.starts_with('{') && l.ends_with('}') && !l[1..l.len() - 1].contains(['{', '}']))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StructuralParse {
    pub triples: Vec<EnrichedTriple>,
    pub skipped: usize,
}

pub const FINAL_OUTPUT_MARKER: &str = "Final output:";

/// Triples from the final-output region of a structural reply.
///
/// Provenance comes from the step that introduced the triple ("Using the
/// similarity / symmetry / transitivity propert..." sections); triples not
/// found there default to [`Provenance::Similarity`]. Non-triple lines are
/// skipped and counted; brace markers such as `{/thought}` are ignored.
pub fn parse_structural_output(raw: &str) -> StructuralParse {
    let (preamble, region) = match raw.rfind(FINAL_OUTPUT_MARKER) {
        Some(pos) => (&raw[..pos], &raw[pos + FINAL_OUTPUT_MARKER.len()..]),
        None => ("", raw),
    };
    let provenance = step_provenance(preamble);
    let mut out = StructuralParse::default();
    for line in region.lines() {
        if line.trim().is_empty() || is_markup(line) {
            continue;
        }
        match parse_triple_line(line).and_then(|(s, r, o)| Triple::from_strs(&s, &r, &o, 0).ok()) {
            Some(t) => {
                let p = provenance.get(&t.key()).copied().unwrap_or(Provenance::Similarity);
                out.triples.push(EnrichedTriple::parsed(t, p));
            }
            None => out.skipped += 1,
        }
    }
    if out.skipped > 0 {
        log::debug!("structural output: skipped {} malformed line(s)", out.skipped);
    }
    out
}

fn step_provenance(text: &str) -> HashMap<TripleKey, Provenance> {
    let mut map = HashMap::new();
    let mut current = Provenance::Similarity;
    for line in text.lines() {
        let lower = line.to_lowercase();
        if lower.contains("using the") {
            if lower.contains("transitivity") {
                current = Provenance::Transitivity;
            } else if lower.contains("symmetry") {
                current = Provenance::Symmetry;
            } else if lower.contains("similarity") {
                current = Provenance::Similarity;
            }
        }
        let Some(pos) = lower.find("is/are") else { continue };
        for cap in paren_group().captures_iter(&line[pos..]) {
            if let Some((s, r, o)) = split_fields(&cap[1]) {
                if let Ok(t) = Triple::from_strs(&s, &r, &o, 0) {
                    map.entry(t.key()).or_insert(current);
                }
            }
        }
    }
    map
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureParse {
    pub triples: Vec<EnrichedTriple>,
    pub rejected: usize,
}

const RESULT_OPEN: &str = "{result}";
const RESULT_CLOSE: &str = "{/result}";

/// Ontology triples from the last `{result}...{/result}` block (or the whole
/// text without markers). Lines whose relation is outside the vocabulary,
/// and lines that are not triples, are rejected and counted.
pub fn parse_feature_output(raw: &str) -> FeatureParse {
    let region = match raw.rfind(RESULT_OPEN) {
        Some(open) => {
            let body = &raw[open + RESULT_OPEN.len()..];
            match body.find(RESULT_CLOSE) {
                Some(close) => &body[..close],
                None => body,
            }
        }
        None => raw,
    };
    let mut out = FeatureParse::default();
    for line in region.lines() {
        if line.trim().is_empty() || is_markup(line) {
            continue;
        }
        let parsed = parse_triple_line(line)
            .filter(|(_, r, _)| OntologyRelation::from_str(r).is_ok())
            .and_then(|(s, r, o)| Triple::from_strs(&s, &r, &o, 0).ok());
        match parsed {
            Some(t) => out.triples.push(EnrichedTriple::parsed(t, Provenance::Hierarchy)),
            None => out.rejected += 1,
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Feature prompt
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct EntityContext {
    pub entity: EntityRef,
    pub triples: Vec<Triple>,
    pub queries: Vec<String>,
}

/// Every distinct subject and object in association order, each with its
/// incident triples and the union of their associated queries.
pub fn entity_contexts(associations: &[Association]) -> Vec<EntityContext> {
    let mut order: Vec<EntityContext> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for a in associations {
        for e in [&a.triple.subject, &a.triple.object] {
            let i = *slot.entry(e.id().to_string()).or_insert_with(|| {
                order.push(EntityContext { entity: e.clone(), triples: Vec::new(), queries: Vec::new() });
                order.len() - 1
            });
            let ctx = &mut order[i];
            if !ctx.triples.contains(&a.triple) {
                ctx.triples.push(a.triple.clone());
            }
            for q in &a.queries {
                if !ctx.queries.contains(q) {
                    ctx.queries.push(q.clone());
                }
            }
        }
    }
    order
}

/// One `[$entity$ context] ... [/$entity$ context]` block per entity.
pub fn build_feature_entity_list(contexts: &[EntityContext]) -> String {
    contexts
        .iter()
        .map(|c| {
            let name = c.entity.id();
            format!(
                "[${name}$ context]\nrelavent triple(s):{}\nrelavent user query(ies):{}\n[/${name}$ context]",
                c.triples.iter().map(Triple::compact).collect::<Vec<_>>().join("-"),
                c.queries.join("-"),
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_feature_prompt(template: &PromptTemplate, contexts: &[EntityContext]) -> Result<String, TemplateError> {
    let list = build_feature_entity_list(contexts);
    render_template(template, &[("entity list", list.as_str())])
}

// ---------------------------------------------------------------------------
// Merge
// ---------------------------------------------------------------------------

/// Fills `source_indices` and `grounded` from the base triples.
///
/// Structural triples are traced to base triples sharing an endpoint;
/// hierarchy triples keep an empty source list.
pub fn attach_sources(generated: &mut [EnrichedTriple], base: &[Triple]) {
    let entities: HashSet<&str> = base.iter().flat_map(|t| [t.subject.id(), t.object.id()]).collect();
    for g in generated.iter_mut() {
        let (s, o) = (g.triple.subject.id(), g.triple.object.id());
        g.grounded = entities.contains(s) || entities.contains(o);
        g.source_indices = if g.provenance == Provenance::Hierarchy {
            Vec::new()
        } else {
            base.iter()
                .filter(|b| [b.subject.id(), b.object.id()].iter().any(|e| *e == s || *e == o))
                .map(|b| b.index)
                .collect()
        };
    }
}

/// Appends generated triples to the pruned graph, dropping any that repeat
/// a base triple or an earlier generated one.
pub fn merge_enriched<F: Scalar>(pruned: PrunedGraph<F>, generated: Vec<EnrichedTriple>) -> EnrichedGraph<F> {
    let mut seen: HashSet<TripleKey> = pruned.kept.iter().map(|s| s.triple.key()).collect();
    let base_triples = pruned.triples();
    let mut kept: Vec<EnrichedTriple> = generated.into_iter().filter(|g| seen.insert(g.triple.key())).collect();
    attach_sources(&mut kept, &base_triples);
    EnrichedGraph { base: pruned, generated: kept }
}

/// Row of `enriched.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrichedRecord {
    pub id: String,
    pub base_indices: Vec<usize>,
    pub generated: Vec<GeneratedRow>,
    pub warnings: EnrichWarnings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRow {
    pub s: String,
    pub r: String,
    pub o: String,
    pub provenance: Provenance,
    pub grounded: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichWarnings {
    pub structural_skipped: usize,
    pub feature_rejected: usize,
}

impl EnrichedRecord {
    pub fn new<F: Scalar>(id: &str, g: &EnrichedGraph<F>, warnings: EnrichWarnings) -> Self {
        Self {
            id: id.to_string(),
            base_indices: g.base.kept.iter().map(|s| s.triple.index).collect(),
            generated: g
                .generated
                .iter()
                .map(|e| GeneratedRow {
                    s: e.triple.subject.id().to_string(),
                    r: e.triple.relation.to_string(),
                    o: e.triple.object.id().to_string(),
                    provenance: e.provenance,
                    grounded: e.grounded,
                })
                .collect(),
            warnings,
        }
    }

    /// Generated triples, indexed after the base graph's largest index.
    pub fn generated_triples(&self, first_index: usize) -> Result<Vec<Triple>, crate::kg::GraphError> {
        self.generated.iter().enumerate().map(|(i, g)| Triple::from_strs(&g.s, &g.r, &g.o, first_index + i)).collect()
    }
}

/// Count of generated triples per provenance tag.
pub fn provenance_counts(generated: &[EnrichedTriple]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for g in generated {
        *m.entry(g.provenance.to_string()).or_insert(0) += 1;
    }
    m
}
