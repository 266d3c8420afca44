//! File-backed knowledge sources: a triple store standing in for a
//! commonsense KG, a noun-definition dictionary, and a sentence corpus with
//! token-overlap retrieval.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{GsapError, Result};
use crate::text::{normalize_surface, tokenize};

/// Relation attached between a topic entity and an entity found in its definition.
pub const DEF_TOP: &str = "DefTop";
/// Relation attached between every question entity and every choice entity.
pub const RELATED_QA: &str = "RelatedQA";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        Self { head: normalize_surface(head), relation: relation.trim().to_string(), tail: normalize_surface(tail) }
    }

    /// "head relation tail", the sentence form used for evidence text.
    pub fn verbalize(&self) -> String {
        format!("{} {} {}", self.head, split_camel(&self.relation), self.tail)
    }
}

fn split_camel(rel: &str) -> String {
    let mut out = String::new();
    for (i, ch) in rel.chars().enumerate() {
        if ch.is_uppercase() && i > 0 {
            out.push(' ');
        }
        out.extend(ch.to_lowercase());
    }
    out.replace(['_', '/'], " ").trim().to_string()
}

/// Undirected view over a set of oriented triples.
#[derive(Clone, Debug, Default)]
pub struct TripleStore {
    triples: Vec<Triple>,
    entity_index: BTreeMap<String, Vec<usize>>,
    relation_vocab: Vec<String>,
    relation_ids: HashMap<String, usize>,
    max_entity_tokens: usize,
}

impl TripleStore {
    /// Builds a store from triples; duplicates (after normalization) are dropped.
    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        let mut seen = BTreeSet::new();
        let mut kept = Vec::new();
        for t in triples {
            if t.head.is_empty() || t.tail.is_empty() || t.head == t.tail {
                continue;
            }
            if seen.insert(t.clone()) {
                kept.push(t);
            }
        }
        let mut entity_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut relations = BTreeSet::new();
        for (i, t) in kept.iter().enumerate() {
            entity_index.entry(t.head.clone()).or_default().push(i);
            entity_index.entry(t.tail.clone()).or_default().push(i);
            relations.insert(t.relation.clone());
        }
        let mut relation_vocab = vec![DEF_TOP.to_string(), RELATED_QA.to_string()];
        relation_vocab.extend(relations.into_iter().filter(|r| r != DEF_TOP && r != RELATED_QA));
        let relation_ids = relation_vocab.iter().enumerate().map(|(i, r)| (r.clone(), i)).collect();
        let max_entity_tokens = entity_index.keys().map(|e| e.split(' ').count()).max().unwrap_or(0);
        Self { triples: kept, entity_index, relation_vocab, relation_ids, max_entity_tokens }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut triples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.trim().is_empty()) {
                return Err(GsapError::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: format!("expected head<TAB>relation<TAB>tail, found {} field(s)", fields.len()),
                });
            }
            triples.push(Triple::new(fields[0], fields[1], fields[2]));
        }
        Ok(Self::from_triples(triples))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GsapError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple(&self, id: usize) -> &Triple {
        &self.triples[id]
    }

    pub fn relation_vocab(&self) -> &[String] {
        &self.relation_vocab
    }

    pub fn relation_id(&self, label: &str) -> Option<usize> {
        self.relation_ids.get(label).copied()
    }

    pub fn contains_entity(&self, surface: &str) -> bool {
        self.entity_index.contains_key(&normalize_surface(surface))
    }

    pub fn entities(&self) -> impl Iterator<Item = &str> {
        self.entity_index.keys().map(String::as_str)
    }

    pub fn entity_count(&self) -> usize {
        self.entity_index.len()
    }

    /// Longest entity, in tokens.
    pub fn max_entity_tokens(&self) -> usize {
        self.max_entity_tokens
    }

    pub fn incident(&self, entity: &str) -> &[usize] {
        self.entity_index.get(entity).map_or(&[], Vec::as_slice)
    }

    /// `(triple id, other endpoint)` for every triple touching `entity`.
    pub fn neighbors<'a>(&'a self, entity: &'a str) -> impl Iterator<Item = (usize, &'a str)> + 'a {
        self.incident(entity).iter().map(move |&id| {
            let t = &self.triples[id];
            (id, if t.head == entity { t.tail.as_str() } else { t.head.as_str() })
        })
    }

    /// Copy with no traversable triples; the entity lexicon and relation
    /// vocabulary are kept so grounding and relation ids are unchanged.
    pub fn without_triples(&self) -> Self {
        let mut s = Self::from_triples(std::iter::empty());
        s.relation_vocab = self.relation_vocab.clone();
        s.relation_ids = self.relation_ids.clone();
        s.entity_index = self.entity_index.keys().map(|k| (k.clone(), Vec::new())).collect();
        s.max_entity_tokens = self.max_entity_tokens;
        s
    }
}

/// One step of a knowledge path, in traversal order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Hop {
    pub from: String,
    pub relation: String,
    pub to: String,
    pub triple: usize,
}

pub type KnowledgePath = Vec<Hop>;

fn path_key(p: &KnowledgePath) -> Vec<(&str, &str, &str)> {
    p.iter().map(|h| (h.from.as_str(), h.relation.as_str(), h.to.as_str())).collect()
}

/// All simple paths of 1..=`max_hops` edges starting at a topic entity,
/// canonically ordered by their `(from, relation, to)` sequence, deduplicated
/// on that sequence, then truncated to `max_paths`.
pub fn query_paths(store: &TripleStore, topics: &BTreeSet<String>, max_hops: usize, max_paths: usize) -> Vec<KnowledgePath> {
    assert!(max_hops >= 1, "max_hops must be at least 1");
    if max_paths == 0 {
        return Vec::new();
    }
    let mut all: Vec<KnowledgePath> = Vec::new();
    for topic in topics {
        let topic = normalize_surface(topic);
        if store.incident(&topic).is_empty() {
            continue;
        }
        let mut stack = vec![topic.clone()];
        let mut path = Vec::new();
        extend_paths(store, &mut stack, &mut path, max_hops, &mut all);
    }
    all.sort_by(|a, b| path_key(a).cmp(&path_key(b)));
    all.dedup_by(|a, b| path_key(a) == path_key(b));
    all.truncate(max_paths);
    all
}

fn extend_paths(
    store: &TripleStore,
    visited: &mut Vec<String>,
    path: &mut KnowledgePath,
    max_hops: usize,
    out: &mut Vec<KnowledgePath>,
) {
    if path.len() == max_hops {
        return;
    }
    let here = visited.last().cloned().expect("path has a start");
    for (id, other) in store.neighbors(&here) {
        if visited.iter().any(|v| v == other) {
            continue;
        }
        let other = other.to_string();
        path.push(Hop { from: here.clone(), relation: store.triple(id).relation.clone(), to: other.clone(), triple: id });
        out.push(path.clone());
        visited.push(other);
        extend_paths(store, visited, path, max_hops, out);
        visited.pop();
        path.pop();
    }
}

/// Noun definitions keyed by normalized entity.
#[derive(Clone, Debug, Default)]
pub struct ParaphraseDict {
    entries: BTreeMap<String, String>,
}

impl ParaphraseDict {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entity: &str, definition: &str) {
        let def = definition.trim();
        assert!(!def.is_empty(), "empty definition for {entity}");
        self.entries.insert(normalize_surface(entity), def.to_string());
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut dict = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            match line.split_once('\t') {
                Some((e, d)) if !e.trim().is_empty() && !d.trim().is_empty() => dict.insert(e, d),
                _ => {
                    return Err(GsapError::Parse {
                        path: path.to_path_buf(),
                        line: n + 1,
                        message: "expected entity<TAB>definition with both fields non-empty".into(),
                    })
                }
            }
        }
        Ok(dict)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GsapError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn get(&self, entity: &str) -> Option<&str> {
        self.entries.get(&normalize_surface(entity)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[derive(Clone, Debug)]
pub struct Sentence {
    pub text: String,
    pub tokens: BTreeSet<String>,
}

/// Sentence corpus ranked by token overlap with a query.
#[derive(Clone, Debug, Default)]
pub struct EvidenceCorpus {
    sentences: Vec<Sentence>,
}

impl EvidenceCorpus {
    pub fn new(sentences: impl IntoIterator<Item = String>) -> Self {
        let sentences = sentences
            .into_iter()
            .filter(|s| !s.trim().is_empty())
            .map(|text| Sentence { tokens: tokenize(&text).into_iter().collect(), text: text.trim().to_string() })
            .collect();
        Self { sentences }
    }

    pub fn parse(text: &str) -> Self {
        Self::new(text.lines().map(str::to_string))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GsapError::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    /// Number of distinct query tokens present in sentence `i`.
    pub fn overlap(&self, i: usize, query: &BTreeSet<String>) -> usize {
        self.sentences[i].tokens.intersection(query).count()
    }
}

/// Top-`top_k` sentences by descending overlap; ties keep corpus order.
pub fn retrieve_evidence(corpus: &EvidenceCorpus, question: &str, top_k: usize) -> Vec<String> {
    let query: BTreeSet<String> = tokenize(question).into_iter().collect();
    let mut scored: Vec<(usize, usize)> = (0..corpus.len()).map(|i| (corpus.overlap(i, &query), i)).collect();
    // stable sort keeps corpus order among equal overlaps
    scored.sort_by(|a, b| b.0.cmp(&a.0));
    scored.into_iter().take(top_k).map(|(_, i)| corpus.sentences[i].text.clone()).collect()
}

pub fn load_store(kg_path: &Path, para_path: &Path, corpus_path: &Path) -> Result<(TripleStore, ParaphraseDict, EvidenceCorpus)> {
    Ok((TripleStore::load(kg_path)?, ParaphraseDict::load(para_path)?, EvidenceCorpus::load(corpus_path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn store(lines: &str) -> TripleStore {
        TripleStore::parse(lines, &PathBuf::from("kg.tsv")).unwrap()
    }

    fn topics(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_three_lines() {
        let s = store("cat\tIsA\tanimal\n# comment\ncat\tDesires\tmilk\nmilk\tAtLocation\tfridge\n");
        assert_eq!(s.len(), 3);
        assert!(s.entity_count() <= 6);
        assert_eq!(s.entity_count(), 4);
        assert_eq!(&s.relation_vocab()[..2], &[DEF_TOP.to_string(), RELATED_QA.to_string()]);
        assert!(s.relation_id("IsA").is_some());
    }

    #[test]
    fn malformed_line_names_file_and_line() {
        let err = TripleStore::parse("a\tr\tb\nbroken line\n", &PathBuf::from("kg.tsv")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("kg.tsv:2"), "{msg}");
    }

    #[test]
    fn case_normalized_lookup() {
        let s = store("Ice_Cream\tIsA\tDessert\n");
        assert!(s.contains_entity("ice cream"));
        assert!(s.contains_entity("ICE CREAM"));
    }

    #[test]
    fn empty_paraphrase_file() {
        let d = ParaphraseDict::parse("", &PathBuf::from("p.tsv")).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.get("cat"), None);
    }

    #[test]
    fn paraphrase_requires_definition() {
        assert!(ParaphraseDict::parse("cat\t \n", &PathBuf::from("p.tsv")).is_err());
    }

    #[test]
    fn chain_paths() {
        let s = store("a\tr\tb\nb\tr\tc\n");
        let paths = query_paths(&s, &topics(&["a"]), 2, 100);
        let rendered: Vec<Vec<(&str, &str)>> =
            paths.iter().map(|p| p.iter().map(|h| (h.from.as_str(), h.to.as_str())).collect()).collect();
        assert_eq!(rendered, vec![vec![("a", "b")], vec![("a", "b"), ("b", "c")]]);
    }

    #[test]
    fn zero_max_paths_and_absent_topic() {
        let s = store("a\tr\tb\n");
        assert!(query_paths(&s, &topics(&["a"]), 2, 0).is_empty());
        assert!(query_paths(&s, &topics(&["zzz"]), 2, 10).is_empty());
    }

    #[test]
    fn retrieval_edge_cases() {
        let c = EvidenceCorpus::parse("cats drink milk\n");
        assert_eq!(retrieve_evidence(&c, "what do cats drink", 10), vec!["cats drink milk"]);
        assert!(retrieve_evidence(&c, "what do cats drink", 0).is_empty());
        assert!(retrieve_evidence(&EvidenceCorpus::default(), "x", 3).is_empty());
    }

    #[test]
    fn verbalizes_camel_case_relations() {
        assert_eq!(Triple::new("cat", "AtLocation", "house").verbalize(), "cat at location house");
    }
}
