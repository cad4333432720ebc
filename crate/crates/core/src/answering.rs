//! Question-answering prompt assembly, answer-format parsing and answer
//! normalization.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::kg::Triple;
use crate::llm::{render_template, PromptTemplate, TemplateError};

pub const FINAL_ANSWER_MARKER: &str = "Final answer:";
pub const ANSWER_SEPARATOR: &str = "<SEP>";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizeOptions {
    /// Strip diacritics after lowercasing ("colón" → "colon").
    #[serde(default)]
    pub ascii_fold: bool,
}

/// Lowercase, drop everything but letters, digits and whitespace, collapse
/// whitespace runs and trim.
pub fn normalize_answer(s: &str) -> String {
    normalize_answer_with(s, NormalizeOptions::default())
}

pub fn normalize_answer_with(s: &str, opts: NormalizeOptions) -> String {
    let lowered = s.to_lowercase();
    let folded: String =
        if opts.ascii_fold { lowered.nfd().filter(|c| !is_combining_mark(*c)).collect() } else { lowered };
    let kept: String = folded.chars().filter(|c| c.is_alphanumeric() || c.is_whitespace()).collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Provider output plus the normalized, deduplicated answers parsed from it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSet {
    pub raw: String,
    pub answers: Vec<String>,
}

impl AnswerSet {
    pub fn from_answers(answers: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        let joined = answers.into_iter().map(|a| a.as_ref().to_string()).collect::<Vec<_>>().join(ANSWER_SEPARATOR);
        parse_final_answers(&format!("{FINAL_ANSWER_MARKER} {joined}"))
    }
}

fn mid_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^m\.[0-9A-Za-z_]+$").expect("valid regex"))
}

fn braced() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([^{}]*)\}").expect("valid regex"))
}

/// Extracts the answer list from a QA completion.
///
/// The region after the last `Final answer:` is split on `<SEP>`. Without
/// the marker, the last `{...}` group is used (the chain-of-thought answer
/// style `The answer is {X}`), falling back to the whole text. Entries in
/// Freebase MID form (`m.0jx21d`) are dropped.
pub fn parse_final_answers(raw: &str) -> AnswerSet {
    parse_final_answers_with(raw, NormalizeOptions::default())
}

pub fn parse_final_answers_with(raw: &str, opts: NormalizeOptions) -> AnswerSet {
    let region: &str = match raw.rfind(FINAL_ANSWER_MARKER) {
        Some(pos) => &raw[pos + FINAL_ANSWER_MARKER.len()..],
        None => match braced().captures_iter(raw).last() {
            Some(c) => c.get(1).map_or(raw, |m| m.as_str()),
            None => raw,
        },
    };
    let region = region.replace("{answer}", "").replace("{/answer}", "");
    let mut seen = HashSet::new();
    let mut answers = Vec::new();
    for part in region.split(ANSWER_SEPARATOR) {
        let mut entry = part.trim();
        entry = entry.strip_prefix('{').unwrap_or(entry);
        entry = entry.strip_suffix('}').unwrap_or(entry);
        let entry = entry.trim();
        if entry.is_empty() || mid_pattern().is_match(entry) {
            continue;
        }
        let norm = normalize_answer_with(entry, opts);
        if !norm.is_empty() && seen.insert(norm.clone()) {
            answers.push(norm);
        }
    }
    AnswerSet { raw: raw.to_string(), answers }
}

/// `(s, r, o)` information lines, one per triple in the given order.
pub fn knowledge_lines(triples: &[Triple]) -> String {
    triples
        .iter()
        .map(|t| format!("({}, {}, {})", t.subject.id(), t.relation, t.object.id()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_qa_prompt(template: &PromptTemplate, question: &str, triples: &[Triple]) -> Result<String, TemplateError> {
    let kg = knowledge_lines(triples);
    render_template(template, &[("question", question), ("knowledge graph", kg.as_str())])
}

/// One answered question as persisted in `answers.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub raw: String,
    pub answers: Vec<String>,
    pub gold: Vec<String>,
}

impl QaRecord {
    pub fn answer_set(&self) -> AnswerSet {
        AnswerSet { raw: self.raw.clone(), answers: self.answers.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{TemplateName, TemplateSet};

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_answer("Costa Rican colón"), "costa rican colón");
        assert_eq!(normalize_answer("  U.S.A. "), "usa");
        assert_eq!(normalize_answer(""), "");
        let folded = normalize_answer_with("Costa Rican colón", NormalizeOptions { ascii_fold: true });
        assert_eq!(folded, "costa rican colon");
    }

    #[test]
    fn parse_sep_list() {
        let a = parse_final_answers("reasoning...\nFinal answer:\nEuro<SEP>Dollar");
        assert_eq!(a.answers, vec!["euro", "dollar"]);
    }

    #[test]
    fn parse_braced() {
        let a = parse_final_answers("Final answer: {Washington, D.C.}");
        assert_eq!(a.answers, vec!["washington dc"]);
    }

    #[test]
    fn parse_drops_mid() {
        assert!(parse_final_answers("Final answer: m.0jx21d").answers.is_empty());
        let a = parse_final_answers("Final answer: m.0jx21d<SEP>Chile");
        assert_eq!(a.answers, vec!["chile"]);
    }

    #[test]
    fn parse_uses_last_marker_and_dedups() {
        let a = parse_final_answers("Final answer: wrong\nmore thought\nFinal answer: A <SEP> a<SEP> <SEP>B");
        assert_eq!(a.answers, vec!["a", "b"]);
    }

    #[test]
    fn parse_cot_style() {
        let a = parse_final_answers("First, ... The answer is {Washington, D.C.}.");
        assert_eq!(a.answers, vec!["washington dc"]);
    }

    #[test]
    fn parse_answer_wrapper_tokens() {
        let a = parse_final_answers("Final answer:\n{answer}\nEuro\n{/answer}");
        assert_eq!(a.answers, vec!["euro"]);
    }

    #[test]
    fn qa_prompt_lines() {
        let set = TemplateSet::builtin();
        let t = set.get(TemplateName::QuestionAnswering);
        let triples = vec![Triple::from_strs("Costa Rica", "currency", "Colón", 0).unwrap()];
        let p = build_qa_prompt(t, "What currency?", &triples).unwrap();
        assert_eq!(p.matches("(Costa Rica, currency, Colón)").count(), 1);
        assert!(p.contains("Final answer:"));
        assert!(p.contains("separate them using <SEP>"));

        let empty = build_qa_prompt(t, "What currency?", &[]).unwrap();
        assert!(empty.contains("information:\n\n[/INST]"));
    }
}
