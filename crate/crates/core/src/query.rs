//! Query decomposition trees and quadruple construction.
//!
//! The provider answers the query-structuring prompt with an indented tree:
//!
//! ```text
//! question
//! -sub-question
//! --sub-sub-question
//! -sub-question
//! ```
//!
//! Leaves are unit queries; internal nodes are compound queries. The
//! flattened pre-order list of node texts is the query set used for pruning.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{KnowledgeGraph, Triple};
use crate::llm::{
    render_template, CallKey, ChatRequest, Gateway, GatewayError, GenerationParams, TemplateName, TemplateSet,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeParseError {
    #[error("empty decomposition")]
    Empty,
    #[error("line {line}: missing root")]
    MissingRoot { line: usize },
    #[error("line {line}: depth jumps from {from} to {to}")]
    DepthJump { line: usize, from: usize, to: usize },
    #[error("line {line}: second root")]
    MultipleRoots { line: usize },
    #[error("line {line}: node has no text")]
    EmptyNode { line: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Compound,
    Unit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryNode {
    pub text: String,
    pub depth: usize,
    pub kind: QueryKind,
    #[serde(skip)]
    pub children: Vec<usize>,
}

/// A parsed tree. `nodes` are in pre-order (input order) with the root at
/// position 0; `flat` holds the distinct node texts in the same order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryDecomposition {
    nodes: Vec<QueryNode>,
    flat: Vec<String>,
}

impl QueryDecomposition {
    /// Degraded fallback: the question as a lone unit query.
    pub fn single(question: &str) -> Self {
        Self {
            nodes: vec![QueryNode { text: question.to_string(), depth: 0, kind: QueryKind::Unit, children: vec![] }],
            flat: vec![question.to_string()],
        }
    }

    /// Rebuilds a decomposition from persisted `(text, depth)` pairs.
    pub fn from_nodes(nodes: impl IntoIterator<Item = (String, usize)>) -> Result<Self, TreeParseError> {
        let text = nodes.into_iter().map(|(t, d)| format!("{}{}", "-".repeat(d), t)).collect::<Vec<_>>().join("\n");
        parse_decomposition_tree(&text)
    }

    pub fn root(&self) -> &QueryNode {
        &self.nodes[0]
    }

    pub fn nodes(&self) -> &[QueryNode] {
        &self.nodes
    }

    pub fn flat(&self) -> &[String] {
        &self.flat
    }

    pub fn children(&self, node: usize) -> impl Iterator<Item = &QueryNode> {
        self.nodes[node].children.iter().map(|&c| &self.nodes[c])
    }

    /// Pre-order lines, `'-' × depth` followed by the text.
    pub fn serialize(&self) -> String {
        self.nodes.iter().map(|n| format!("{}{}", "-".repeat(n.depth), n.text)).collect::<Vec<_>>().join("\n")
    }
}

pub fn parse_decomposition_tree(raw: &str) -> Result<QueryDecomposition, TreeParseError> {
    let mut nodes: Vec<QueryNode> = Vec::new();
    // stack[d] = index of the most recent node at depth d
    let mut stack: Vec<usize> = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let depth = trimmed.chars().take_while(|c| *c == '-').count();
        let text = trimmed[depth..].trim();
        if text.is_empty() {
            return Err(TreeParseError::EmptyNode { line: lineno });
        }
        if nodes.is_empty() {
            if depth > 0 {
                return Err(TreeParseError::MissingRoot { line: lineno });
            }
        } else if depth == 0 {
            return Err(TreeParseError::MultipleRoots { line: lineno });
        } else if depth > stack.len() {
            return Err(TreeParseError::DepthJump { line: lineno, from: stack.len() - 1, to: depth });
        }
        let pos = nodes.len();
        stack.truncate(depth);
        if let Some(&parent) = stack.last() {
            nodes[parent].children.push(pos);
            nodes[parent].kind = QueryKind::Compound;
        }
        stack.push(pos);
        nodes.push(QueryNode { text: text.to_string(), depth, kind: QueryKind::Unit, children: vec![] });
    }
    if nodes.is_empty() {
        return Err(TreeParseError::Empty);
    }
    let mut seen = HashSet::new();
    let flat = nodes.iter().filter(|n| seen.insert(n.text.as_str())).map(|n| n.text.clone()).collect();
    Ok(QueryDecomposition { nodes, flat })
}

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("template: {0}")]
    Template(#[from] crate::llm::TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Result of [`decompose`]; `degraded` marks the single-node fallback.
#[derive(Clone, Debug)]
pub struct Decomposed {
    pub decomposition: QueryDecomposition,
    pub degraded: bool,
}

/// Asks the provider for a decomposition tree. A malformed reply is retried
/// once with the same prompt; a second failure falls back to the question
/// alone.
pub fn decompose(
    question_id: &str,
    question: &str,
    gateway: &Gateway,
    templates: &TemplateSet,
    params: GenerationParams,
) -> Result<Decomposed, DecomposeError> {
    if question.trim().is_empty() {
        return Err(DecomposeError::EmptyQuestion);
    }
    let prompt = render_template(templates.get(TemplateName::QueryStructuring), &[("question", question)])?;
    let request = ChatRequest::user(prompt, params);
    let key = CallKey::new(TemplateName::QueryStructuring, question_id);
    for attempt in 1..=2 {
        let reply = gateway.complete(&request, &key)?;
        match parse_decomposition_tree(&reply.content) {
            Ok(decomposition) => return Ok(Decomposed { decomposition, degraded: false }),
            Err(e) => log::warn!("{question_id}: decomposition attempt {attempt} unparseable: {e}"),
        }
    }
    log::warn!("{question_id}: using single-node decomposition");
    Ok(Decomposed { decomposition: QueryDecomposition::single(question), degraded: true })
}

/// A triple paired with its graph query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Quadruple {
    pub graph_query: String,
    pub triple: Triple,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("graph query refers to triple index {0}, which is not in the graph")]
pub struct UnknownTriple(pub usize);

/// `"What is the {relation text} of {subject}?"`.
pub fn fallback_graph_query(t: &Triple) -> String {
    format!("What is the {} of {}?", t.relation.text(), t.subject.name())
}

/// One quadruple per triple in graph order. Triples without an entry in
/// `graph_queries` (keyed by triple index) get [`fallback_graph_query`].
pub fn build_quadruples(
    g: &KnowledgeGraph,
    graph_queries: &BTreeMap<usize, String>,
) -> Result<Vec<Quadruple>, UnknownTriple> {
    let known: HashSet<usize> = g.triples().iter().map(|t| t.index).collect();
    if let Some(bad) = graph_queries.keys().find(|k| !known.contains(k)) {
        return Err(UnknownTriple(*bad));
    }
    Ok(g.triples()
        .iter()
        .map(|t| {
            let graph_query = graph_queries
                .get(&t.index)
                .filter(|q| !q.trim().is_empty())
                .cloned()
                .unwrap_or_else(|| fallback_graph_query(t));
            Quadruple { graph_query, triple: t.clone() }
        })
        .collect())
}

/// Row of `parsed.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedRecord {
    pub id: String,
    pub question: String,
    pub nodes: Vec<PersistedNode>,
    pub flat: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersistedNode {
    pub text: String,
    pub depth: usize,
    pub kind: QueryKind,
}

impl ParsedRecord {
    pub fn new(id: &str, question: &str, d: &QueryDecomposition) -> Self {
        Self {
            id: id.to_string(),
            question: question.to_string(),
            nodes: d
                .nodes()
                .iter()
                .map(|n| PersistedNode { text: n.text.clone(), depth: n.depth, kind: n.kind })
                .collect(),
            flat: d.flat().to_vec(),
        }
    }

    pub fn decomposition(&self) -> Result<QueryDecomposition, TreeParseError> {
        QueryDecomposition::from_nodes(self.nodes.iter().map(|n| (n.text.clone(), n.depth)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::load_graph;
    use crate::llm::ScriptedStub;
    use std::sync::Arc;

    #[test]
    fn small_tree() {
        let d = parse_decomposition_tree("Q\n-A\n--A1\n--A2\n-B").unwrap();
        assert_eq!(d.root().text, "Q");
        assert_eq!(d.root().kind, QueryKind::Compound);
        let kids: Vec<_> = d.children(0).collect();
        assert_eq!(kids.len(), 2);
        assert_eq!(kids[0].kind, QueryKind::Compound);
        assert_eq!(d.children(1).filter(|n| n.kind == QueryKind::Unit).count(), 2);
        assert_eq!(kids[1].kind, QueryKind::Unit);
        assert_eq!(d.flat(), ["Q", "A", "A1", "A2", "B"]);
    }

    #[test]
    fn demonstration_example_one() {
        let raw = "What is the name of the scientist who developed the theory that explains why objects fall to Earth?
-What is the theory that explains why objects fall to Earth?
--Is there a theory for why objects fall to Earth?
--What is the name of this theory?
-Who developed this theory?
--Is this theory associated with a specific scientist?
--What is the name of this scientist?";
        let d = parse_decomposition_tree(raw).unwrap();
        let kids: Vec<_> = d.children(0).collect();
        assert_eq!(kids.len(), 2);
        assert!(kids.iter().all(|k| k.kind == QueryKind::Compound));
        let units: Vec<_> = d.nodes().iter().filter(|n| n.depth == 2).collect();
        assert_eq!(units.len(), 4);
        assert!(units.iter().all(|n| n.kind == QueryKind::Unit));
        assert_eq!(d.serialize(), raw);
    }

    #[test]
    fn malformed_trees() {
        assert_eq!(parse_decomposition_tree("-X"), Err(TreeParseError::MissingRoot { line: 1 }));
        assert_eq!(parse_decomposition_tree(""), Err(TreeParseError::Empty));
        assert_eq!(parse_decomposition_tree("\n  \n"), Err(TreeParseError::Empty));
        assert_eq!(parse_decomposition_tree("Q\n-A\n---B"), Err(TreeParseError::DepthJump { line: 3, from: 1, to: 3 }));
        assert_eq!(parse_decomposition_tree("Q\nR"), Err(TreeParseError::MultipleRoots { line: 2 }));
        assert_eq!(parse_decomposition_tree("Q\n--"), Err(TreeParseError::EmptyNode { line: 2 }));
    }

    #[test]
    fn blank_lines_and_duplicates() {
        let d = parse_decomposition_tree("Q\n\n-A\n-A\n").unwrap();
        assert_eq!(d.nodes().len(), 3);
        assert_eq!(d.flat(), ["Q", "A"]);
    }

    fn gateway(stub: ScriptedStub) -> Gateway {
        Gateway::new(Arc::new(stub))
    }

    #[test]
    fn decompose_unit_question() {
        let gw = gateway(ScriptedStub::new().with_response(TemplateName::QueryStructuring, "q", "Who is X?"));
        let out = decompose("q", "Who is X?", &gw, &TemplateSet::builtin(), GenerationParams::default()).unwrap();
        assert!(!out.degraded);
        assert_eq!(out.decomposition.nodes().len(), 1);
        assert_eq!(out.decomposition.root().kind, QueryKind::Unit);
        assert_eq!(gw.ledger().entry("q").calls, 1);
    }

    #[test]
    fn decompose_running_example() {
        let q = "What is the currency in the governmental jurisdiction with office holder Astrid Fischel Volio?";
        let tree = format!(
            "{q}\n-What is the currency in Astrid Fischel Volio's jurisdiction?\n--What areas does Astrid Fischel Volio oversee?\n--Who is Astrid Fischel Volio?"
        );
        let gw = gateway(ScriptedStub::new().with_response(TemplateName::QueryStructuring, "cwq-1", tree));
        let out = decompose("cwq-1", q, &gw, &TemplateSet::builtin(), GenerationParams::default()).unwrap();
        let flat = out.decomposition.flat();
        assert_eq!(flat[0], q);
        assert!(flat.iter().any(|s| s == "What is the currency in Astrid Fischel Volio's jurisdiction?"));
        assert!(flat.iter().any(|s| s == "Who is Astrid Fischel Volio?"));
    }

    #[test]
    fn decompose_retries_then_degrades() {
        let gw = gateway(ScriptedStub::new().with_response(TemplateName::QueryStructuring, "q", "-X"));
        let out = decompose("q", "Original?", &gw, &TemplateSet::builtin(), GenerationParams::default()).unwrap();
        assert!(out.degraded);
        assert_eq!(out.decomposition.flat(), ["Original?"]);
        assert_eq!(out.decomposition.root().kind, QueryKind::Unit);
        assert_eq!(gw.ledger().entry("q").calls, 2);
    }

    #[test]
    fn decompose_transport_failure_is_error() {
        let gw = gateway(ScriptedStub::new());
        assert!(matches!(
            decompose("q", "Q?", &gw, &TemplateSet::builtin(), GenerationParams::default()),
            Err(DecomposeError::Gateway(_))
        ));
        assert!(matches!(
            decompose("q", " ", &gw, &TemplateSet::builtin(), GenerationParams::default()),
            Err(DecomposeError::EmptyQuestion)
        ));
    }

    #[test]
    fn quadruples() {
        let g = load_graph(vec![
            vec!["Costa Rica", "monetary value", "Costa Rican colón"],
            vec!["Costa Rica", "location.country.capital", "San José"],
        ])
        .unwrap();
        let mut generated = BTreeMap::new();
        generated.insert(0, "What's the monetary value in Costa Rica?".to_string());
        let quads = build_quadruples(&g, &generated).unwrap();
        assert_eq!(quads[0].graph_query, "What's the monetary value in Costa Rica?");
        assert_eq!(quads[0].triple.object.id(), "Costa Rican colón");
        assert_eq!(quads[1].graph_query, "What is the location country capital of Costa Rica?");

        generated.insert(9, "x".into());
        assert_eq!(build_quadruples(&g, &generated), Err(UnknownTriple(9)));

        let empty = load_graph(Vec::<Vec<String>>::new()).unwrap();
        assert!(build_quadruples(&empty, &BTreeMap::new()).unwrap().is_empty());
    }

    #[test]
    fn persisted_round_trip() {
        let d = parse_decomposition_tree("Q\n-A\n--A1\n-B").unwrap();
        let rec = ParsedRecord::new("id", "Q", &d);
        assert_eq!(rec.decomposition().unwrap(), d);
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains(r#""kind":"compound""#));
    }
}
