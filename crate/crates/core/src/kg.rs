//! Immutable knowledge-graph storage.
//!
//! A [`KnowledgeGraph`] is an ordered list of [`Triple`]s plus two endpoint
//! indices (subject id and object id to triple positions). Graphs are loaded
//! once, deduplicated on `(subject, relation, object)`, and never mutated.

use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("invalid relation name {0:?}")]
    InvalidRelation(String),
    #[error("empty entity id")]
    EmptyEntity,
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Entity identifier with an optional display label.
///
/// Identity is the raw id string; labels never take part in equality.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntityRef {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

impl EntityRef {
    pub fn new(id: impl Into<String>) -> Result<Self, GraphError> {
        let id = id.into();
        if id.is_empty() {
            return Err(GraphError::EmptyEntity);
        }
        Ok(Self { id, label: None })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    /// Label if present, otherwise the id.
    pub fn name(&self) -> &str {
        self.label.as_deref().unwrap_or(&self.id)
    }
}

impl PartialEq for EntityRef {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

impl Eq for EntityRef {}

impl Hash for EntityRef {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.id.hash(state);
    }
}

impl fmt::Display for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Relation name, e.g. `location.country.currency_used`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Relation(String);

impl Relation {
    pub fn new(name: impl Into<String>) -> Result<Self, GraphError> {
        let name = name.into();
        if name.is_empty() || name.trim() != name {
            return Err(GraphError::InvalidRelation(name));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Relation with dotted segments and underscores turned into spaces.
    pub fn text(&self) -> String {
        humanize_relation(&self.0)
    }
}

impl TryFrom<String> for Relation {
    type Error = GraphError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Relation> for String {
    fn from(r: Relation) -> Self {
        r.0
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn humanize_relation(name: &str) -> String {
    name.split(['.', '_']).filter(|s| !s.is_empty()).collect::<Vec<_>>().join(" ")
}

/// A `(subject, relation, object)` fact. `index` is the position in the
/// source graph and is ignored by equality.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Triple {
    pub subject: EntityRef,
    pub relation: Relation,
    pub object: EntityRef,
    pub index: usize,
}

impl Triple {
    pub fn new(subject: EntityRef, relation: Relation, object: EntityRef, index: usize) -> Self {
        Self { subject, relation, object, index }
    }

    /// Builds a triple from raw strings; fields are trimmed.
    pub fn from_strs(s: &str, r: &str, o: &str, index: usize) -> Result<Self, GraphError> {
        Ok(Self::new(EntityRef::new(s.trim())?, Relation::new(r.trim())?, EntityRef::new(o.trim())?, index))
    }

    pub fn key(&self) -> TripleKey {
        TripleKey {
            subject: self.subject.id.clone(),
            relation: self.relation.0.clone(),
            object: self.object.id.clone(),
        }
    }

    /// `"(s,r,o)"` with raw ids, the layout used inside prompts.
    pub fn compact(&self) -> String {
        format!("({},{},{})", self.subject.id, self.relation, self.object.id)
    }
}

impl PartialEq for Triple {
    fn eq(&self, other: &Self) -> bool {
        self.subject == other.subject && self.relation == other.relation && self.object == other.object
    }
}

impl Eq for Triple {}

impl Hash for Triple {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.subject.hash(state);
        self.relation.hash(state);
        self.object.hash(state);
    }
}

/// Owned `(s, r, o)` identity used for deduplication.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TripleKey {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

/// `"subject relation object"` with the relation humanized.
pub fn textualize_triple(t: &Triple) -> String {
    join_words(&[t.subject.name(), &t.relation.text(), t.object.name()])
}

pub(crate) fn join_words(parts: &[&str]) -> String {
    parts.iter().filter(|p| !p.is_empty()).copied().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, Default)]
pub struct KnowledgeGraph {
    triples: Vec<Triple>,
    by_subject: HashMap<String, Vec<usize>>,
    by_object: HashMap<String, Vec<usize>>,
}

impl KnowledgeGraph {
    /// Builds a graph from already-constructed triples, reindexing them
    /// `0..n` in input order and dropping duplicates (first kept).
    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        let mut g = Self::default();
        let mut seen = std::collections::HashSet::new();
        for mut t in triples {
            if !seen.insert(t.key()) {
                continue;
            }
            t.index = g.triples.len();
            g.push_indexed(t);
        }
        g
    }

    /// Builds a graph that keeps each triple's existing `index`.
    ///
    /// Used for subgraphs (e.g. pruned graphs) whose triples must keep
    /// their position in the source graph. Duplicates are dropped.
    pub fn from_subgraph(triples: impl IntoIterator<Item = Triple>) -> Self {
        let mut g = Self::default();
        let mut seen = std::collections::HashSet::new();
        for t in triples {
            if seen.insert(t.key()) {
                g.push_indexed(t);
            }
        }
        g
    }

    fn push_indexed(&mut self, t: Triple) {
        let pos = self.triples.len();
        self.by_subject.entry(t.subject.id.clone()).or_default().push(pos);
        self.by_object.entry(t.object.id.clone()).or_default().push(pos);
        self.triples.push(t);
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Positions (into [`Self::triples`]) of triples with this subject id.
    pub fn by_subject(&self, id: &str) -> &[usize] {
        self.by_subject.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn by_object(&self, id: &str) -> &[usize] {
        self.by_object.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn get(&self, index: usize) -> Option<&Triple> {
        self.triples.iter().find(|t| t.index == index)
    }

    pub fn contains_entity(&self, id: &str) -> bool {
        self.by_subject.contains_key(id) || self.by_object.contains_key(id)
    }

    /// Loads a JSON array of `[s, r, o]` string arrays.
    pub fn from_json_str(text: &str) -> Result<Self, GraphError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let rows = value
            .as_array()
            .ok_or_else(|| GraphError::Malformed { line: 0, reason: "expected a JSON array of triples".into() })?;
        let mut records = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let line = i + 1;
            let fields = row
                .as_array()
                .ok_or_else(|| GraphError::Malformed { line, reason: "record is not an array".into() })?;
            let mut rec = Vec::with_capacity(fields.len());
            for f in fields {
                let s =
                    f.as_str().ok_or_else(|| GraphError::Malformed { line, reason: "field is not a string".into() })?;
                rec.push(s.to_string());
            }
            records.push((line, rec));
        }
        load_numbered(records)
    }

    /// Loads tab-separated triples, one per line. Blank lines are ignored.
    pub fn from_tsv_str(text: &str) -> Result<Self, GraphError> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r').split('\t').map(str::to_string).collect()))
            .collect::<Vec<_>>();
        load_numbered(records)
    }

    /// Loads from a file; `.tsv` files are tab-separated, everything else JSON.
    pub fn from_path(path: &FsPath) -> Result<Self, GraphError> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => Self::from_tsv_str(&text),
            _ => Self::from_json_str(&text),
        }
    }

    pub fn extract_paths(&self, max_hops: HopLimit) -> Vec<Path> {
        extract_paths(self, max_hops)
    }

    pub fn group_by_endpoints(&self, mode: GroupMode) -> Vec<Vec<&Triple>> {
        group_by_endpoints(&self.triples, mode)
    }
}

/// Loads a graph from string records. Line numbers in errors are 1-based
/// record positions.
pub fn load_graph<I, R, S>(records: I) -> Result<KnowledgeGraph, GraphError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = S>,
    S: Into<String>,
{
    load_numbered(records.into_iter().enumerate().map(|(i, r)| (i + 1, r.into_iter().map(Into::into).collect())))
}

fn load_numbered(records: impl IntoIterator<Item = (usize, Vec<String>)>) -> Result<KnowledgeGraph, GraphError> {
    let mut triples = Vec::new();
    for (line, rec) in records {
        if rec.len() != 3 {
            return Err(GraphError::Malformed { line, reason: format!("expected 3 fields, found {}", rec.len()) });
        }
        if rec.iter().any(|f| f.trim().is_empty()) {
            return Err(GraphError::Malformed { line, reason: "empty field".into() });
        }
        let t = Triple::from_strs(&rec[0], &rec[1], &rec[2], 0)
            .map_err(|e| GraphError::Malformed { line, reason: e.to_string() })?;
        triples.push(t);
    }
    Ok(KnowledgeGraph::from_triples(triples))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HopLimit {
    One,
    Two,
}

/// A 1-hop path (single triple) or a forward 2-hop chain where the first
/// triple's object is the second triple's subject.
#[derive(Clone, Debug, PartialEq)]
pub enum Path {
    OneHop(Triple),
    TwoHop { first: Triple, second: Triple },
}

impl Path {
    pub fn hops(&self) -> Vec<&Triple> {
        match self {
            Path::OneHop(t) => vec![t],
            Path::TwoHop { first, second } => vec![first, second],
        }
    }

    pub fn join_entity(&self) -> Option<&EntityRef> {
        match self {
            Path::OneHop(_) => None,
            Path::TwoHop { first, .. } => Some(&first.object),
        }
    }

    pub fn is_two_hop(&self) -> bool {
        matches!(self, Path::TwoHop { .. })
    }

    /// `(a,r1,b)` or `(a,r1,b)->(b,r2,c)`.
    pub fn compact(&self) -> String {
        self.hops().iter().map(|t| t.compact()).collect::<Vec<_>>().join("->")
    }
}

/// All 1-hop paths (graph order), followed by 2-hop chains ordered by
/// `(first.index, second.index)` when `max_hops` is [`HopLimit::Two`].
pub fn extract_paths(g: &KnowledgeGraph, max_hops: HopLimit) -> Vec<Path> {
    let mut paths: Vec<Path> = g.triples.iter().cloned().map(Path::OneHop).collect();
    if max_hops == HopLimit::Two {
        let mut chains = Vec::new();
        for first in &g.triples {
            for &pos in g.by_subject(&first.object.id) {
                chains.push((first, &g.triples[pos]));
            }
        }
        chains.sort_by_key(|(a, b)| (a.index, b.index));
        paths.extend(chains.into_iter().map(|(a, b)| Path::TwoHop { first: a.clone(), second: b.clone() }));
    }
    paths
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMode {
    Head,
    Tail,
    #[default]
    HeadAndTail,
}

/// Partitions triples by head, tail or (head, tail). Groups appear in
/// first-occurrence order and singletons are kept.
pub fn group_by_endpoints(triples: &[Triple], mode: GroupMode) -> Vec<Vec<&Triple>> {
    let mut slot: HashMap<(&str, &str), usize> = HashMap::new();
    let mut groups: Vec<Vec<&Triple>> = Vec::new();
    for t in triples {
        let key = match mode {
            GroupMode::Head => (t.subject.id(), ""),
            GroupMode::Tail => ("", t.object.id()),
            GroupMode::HeadAndTail => (t.subject.id(), t.object.id()),
        };
        match slot.get(&key) {
            Some(&g) => groups[g].push(t),
            None => {
                slot.insert(key, groups.len());
                groups.push(vec![t]);
            }
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(rows: &[[&str; 3]]) -> KnowledgeGraph {
        load_graph(rows.iter().map(|r| r.to_vec())).unwrap()
    }

    #[test]
    fn load_single_triple() {
        let graph = g(&[["Beijing", "located_in", "China"]]);
        assert_eq!(graph.len(), 1);
        assert_eq!(graph.by_subject("Beijing"), &[0]);
        assert_eq!(graph.by_object("China"), &[0]);
    }

    #[test]
    fn load_drops_duplicates() {
        let graph = g(&[["a", "r", "b"], ["a", "r", "b"]]);
        assert_eq!(graph.len(), 1);
    }

    #[test]
    fn load_rejects_short_record() {
        let err = load_graph(vec![vec!["a", "r"]]).unwrap_err();
        match err {
            GraphError::Malformed { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_empty_field_with_line() {
        let err = load_graph(vec![vec!["a", "r", "b"], vec!["a", " ", "b"]]).unwrap_err();
        assert!(matches!(err, GraphError::Malformed { line: 2, .. }));
    }

    #[test]
    fn empty_input_is_empty_graph() {
        let graph = load_graph(Vec::<Vec<String>>::new()).unwrap();
        assert!(graph.is_empty());
    }

    #[test]
    fn json_and_tsv_agree() {
        let json = r#"[["a","x.y","b"],["b","z","c"],["a","x.y","b"]]"#;
        let tsv = "a\tx.y\tb\nb\tz\tc\n\na\tx.y\tb\n";
        let a = KnowledgeGraph::from_json_str(json).unwrap();
        let b = KnowledgeGraph::from_tsv_str(tsv).unwrap();
        assert_eq!(a.triples(), b.triples());
        let ia: Vec<_> = a.triples().iter().map(|t| t.index).collect();
        let ib: Vec<_> = b.triples().iter().map(|t| t.index).collect();
        assert_eq!(ia, ib);
    }

    #[test]
    fn tsv_error_reports_file_line() {
        let err = KnowledgeGraph::from_tsv_str("a\tr\tb\n\nbad line\n").unwrap_err();
        assert!(matches!(err, GraphError::Malformed { line: 3, .. }));
    }

    #[test]
    fn textualize_examples() {
        let t = Triple::from_strs("Beijing", "located_in", "China", 0).unwrap();
        assert_eq!(textualize_triple(&t), "Beijing located in China");
        let t = Triple::from_strs("a", "x.y.z_w", "b", 0).unwrap();
        assert_eq!(textualize_triple(&t), "a x y z w b");
        let t = Triple::from_strs("m.01", "r", "m.02", 0).unwrap();
        assert_eq!(textualize_triple(&t), "m.01 r m.02");
    }

    #[test]
    fn relation_rejects_padding() {
        assert!(Relation::new(" r").is_err());
        assert!(Relation::new("").is_err());
    }

    #[test]
    fn equality_ignores_index_and_label() {
        let a = Triple::from_strs("a", "r", "b", 0).unwrap();
        let mut b = Triple::from_strs("a", "r", "b", 7).unwrap();
        b.subject = b.subject.with_label("Alpha");
        assert_eq!(a, b);
    }

    #[test]
    fn two_hop_single_chain() {
        let graph = g(&[["a", "r1", "b"], ["b", "r2", "c"]]);
        let two: Vec<_> = extract_paths(&graph, HopLimit::Two).into_iter().filter(Path::is_two_hop).collect();
        assert_eq!(two.len(), 1);
        assert_eq!(two[0].compact(), "(a,r1,b)->(b,r2,c)");
        assert_eq!(two[0].join_entity().unwrap().id(), "b");
    }

    #[test]
    fn two_hop_none_without_join() {
        let graph = g(&[["a", "r1", "b"]]);
        let paths = extract_paths(&graph, HopLimit::Two);
        assert_eq!(paths.len(), 1);
        assert!(!paths[0].is_two_hop());
    }

    #[test]
    fn two_hop_branching_matches_enumeration() {
        let graph = g(&[["a", "r1", "b"], ["b", "r2", "c"], ["b", "r3", "d"]]);
        let two: Vec<_> = extract_paths(&graph, HopLimit::Two).into_iter().filter(Path::is_two_hop).collect();
        assert_eq!(two.len(), 2);
        let one_only = extract_paths(&graph, HopLimit::One);
        assert_eq!(one_only.len(), 3);
    }

    #[test]
    fn grouping_examples() {
        let graph = g(&[["a", "r1", "b"], ["a", "r2", "b"], ["a", "r3", "c"]]);
        let groups = graph.group_by_endpoints(GroupMode::HeadAndTail);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].len(), 2);
        assert_eq!(groups[1].len(), 1);

        let graph = g(&[["a", "r1", "b"]]);
        for mode in [GroupMode::Head, GroupMode::Tail, GroupMode::HeadAndTail] {
            assert_eq!(graph.group_by_endpoints(mode).len(), 1);
        }

        let graph = g(&[["a", "r1", "b"], ["c", "r2", "b"]]);
        let groups = graph.group_by_endpoints(GroupMode::Tail);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].len(), 2);
    }
}
