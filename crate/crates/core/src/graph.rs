//! Evidence graph construction: topic grounding, path retrieval, paraphrase
//! attachment, relevance scoring, pruning and question-to-choice triplet
//! selection.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use gsap_autograd::{Mat, ParamStore, Tape};
use serde::{Deserialize, Serialize};

use crate::error::{GsapError, Result};
use crate::knowledge::{query_paths, ParaphraseDict, TripleStore, DEF_TOP, RELATED_QA};
use crate::nn::Linear;
use crate::text::{normalize_surface, singular_forms, tokenize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeType {
    #[serde(rename = "QUESTION_ENTITY")]
    Question,
    #[serde(rename = "CHOICE_ENTITY")]
    Choice,
    #[serde(rename = "OTHER_ENTITY")]
    Other,
    #[serde(rename = "PARAPHRASE_ENTITY")]
    Paraphrase,
}

impl NodeType {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            NodeType::Question => 0,
            NodeType::Choice => 1,
            NodeType::Other => 2,
            NodeType::Paraphrase => 3,
        }
    }

    pub fn is_topic(self) -> bool {
        matches!(self, NodeType::Question | NodeType::Choice)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceNode {
    pub id: usize,
    pub surface: String,
    #[serde(rename = "type")]
    pub node_type: NodeType,
    pub relevance: f64,
}

/// Undirected edge that remembers the orientation its source gave it.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvidenceEdge {
    pub head: usize,
    pub tail: usize,
    pub relation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceGraph {
    pub question: String,
    pub nodes: Vec<EvidenceNode>,
    pub edges: Vec<EvidenceEdge>,
}

/// Grounded entities of one question and its choices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TopicEntities {
    pub question: Vec<String>,
    /// `(entity, choice index)`
    pub choices: Vec<(String, usize)>,
}

impl TopicEntities {
    /// Restriction to the entities of a single choice.
    pub fn for_choice(&self, choice: usize) -> TopicEntities {
        TopicEntities {
            question: self.question.clone(),
            choices: self.choices.iter().filter(|(_, c)| *c == choice).cloned().collect(),
        }
    }

    pub fn all(&self) -> BTreeSet<String> {
        self.question.iter().chain(self.choices.iter().map(|(e, _)| e)).cloned().collect()
    }
}

/// Greedy left-to-right longest match of store entities over `text`.
/// Each span also matches if its last token de-pluralizes to an entity.
pub fn match_entities(text: &str, store: &TripleStore) -> Vec<String> {
    let toks = tokenize(text);
    let max_len = store.max_entity_tokens();
    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        let mut matched = None;
        for len in (1..=max_len.min(toks.len() - i)).rev() {
            if let Some(e) = span_entity(&toks[i..i + len], store) {
                matched = Some((e, len));
                break;
            }
        }
        match matched {
            Some((e, len)) => {
                if !out.contains(&e) {
                    out.push(e);
                }
                i += len;
            }
            None => i += 1,
        }
    }
    out
}

fn span_entity(span: &[String], store: &TripleStore) -> Option<String> {
    let (last, init) = span.split_last()?;
    for form in singular_forms(last) {
        let mut words: Vec<&str> = init.iter().map(String::as_str).collect();
        words.push(&form);
        let cand = words.join(" ");
        if store.contains_entity(&cand) {
            return Some(cand);
        }
    }
    None
}

/// Grounds the question and each choice in the store lexicon. A choice with
/// no lexicon match contributes its whole normalized text as one entity.
pub fn extract_topic_entities(question: &str, choices: &[String], store: &TripleStore) -> Result<TopicEntities> {
    assert!(!choices.is_empty(), "at least one choice required");
    let q = match_entities(question, store);
    if q.is_empty() {
        return Err(GsapError::QuestionUngrounded(question.to_string()));
    }
    let mut cs = Vec::new();
    for (ci, choice) in choices.iter().enumerate() {
        let found = match_entities(choice, store);
        if found.is_empty() {
            let whole = normalize_surface(choice);
            if !whole.is_empty() {
                cs.push((whole, ci));
            }
        } else {
            cs.extend(found.into_iter().map(|e| (e, ci)));
        }
    }
    Ok(TopicEntities { question: q, choices: cs })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub max_hops: usize,
    pub max_paths: usize,
    /// Retrieve KG paths from the topic entities.
    pub use_paths: bool,
    /// Attach entities found in topic definitions.
    pub paraphrase_nodes: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { max_hops: 2, max_paths: 100, use_paths: true, paraphrase_nodes: true }
    }
}

impl EvidenceGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_index(&self) -> HashMap<&str, usize> {
        self.nodes.iter().map(|n| (n.surface.as_str(), n.id)).collect()
    }

    pub fn nodes_of(&self, t: NodeType) -> impl Iterator<Item = &EvidenceNode> {
        self.nodes.iter().filter(move |n| n.node_type == t)
    }

    pub fn relevances(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.relevance).collect()
    }

    /// Structural checks: ids are positions, endpoints exist and differ,
    /// relevance lies in (0, 1).
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(format!("node {i} carries id {}", n.id));
            }
            if !(n.relevance > 0.0 && n.relevance < 1.0) {
                return Err(format!("node {i} relevance {} outside (0,1)", n.relevance));
            }
        }
        for e in &self.edges {
            if e.head >= self.nodes.len() || e.tail >= self.nodes.len() {
                return Err(format!("dangling edge {e:?}"));
            }
            if e.head == e.tail {
                return Err(format!("self loop {e:?}"));
            }
        }
        Ok(())
    }

    /// Node-induced subgraph over `keep` (ascending ids), renumbered.
    pub fn induced(&self, keep: &[usize]) -> EvidenceGraph {
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut nodes = Vec::with_capacity(keep.len());
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
            let mut n = self.nodes[old].clone();
            n.id = new;
            nodes.push(n);
        }
        let edges = self
            .edges
            .iter()
            .filter(|e| remap[e.head] != usize::MAX && remap[e.tail] != usize::MAX)
            .map(|e| EvidenceEdge { head: remap[e.head], tail: remap[e.tail], relation: e.relation.clone() })
            .collect();
        EvidenceGraph { question: self.question.clone(), nodes, edges }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let nodes: Vec<_> = self
            .nodes
            .iter()
            .map(|n| serde_json::json!({"id": n.id, "surface": n.surface, "type": n.node_type, "relevance": n.relevance}))
            .collect();
        let edges: Vec<_> = self
            .edges
            .iter()
            .map(|e| serde_json::json!({"head": e.head, "tail": e.tail, "relation": e.relation}))
            .collect();
        serde_json::json!({"question": self.question, "nodes": nodes, "edges": edges})
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json())?;
        fs::write(path, text).map_err(|e| GsapError::io(path, e))
    }
}

/// Merges KG paths around the topic entities, a `RelatedQA` edge for every
/// question/choice pair and `DefTop` edges to entities found in topic
/// definitions. Node types resolve question > choice > paraphrase > other.
pub fn build_graph(
    question: &str,
    topics: &TopicEntities,
    store: &TripleStore,
    para: &ParaphraseDict,
    cfg: &GraphConfig,
) -> EvidenceGraph {
    assert!(!topics.question.is_empty(), "build_graph needs at least one question entity");
    let q_set: BTreeSet<&str> = topics.question.iter().map(String::as_str).collect();
    let c_set: BTreeSet<&str> =
        topics.choices.iter().map(|(e, _)| e.as_str()).filter(|e| !q_set.contains(e)).collect();

    // (head, relation, tail) surfaces, deduplicated
    let mut edges: Vec<(String, String, String)> = Vec::new();
    let mut seen_edges: BTreeSet<(String, String, String)> = BTreeSet::new();
    let mut push_edge = |edges: &mut Vec<_>, e: (String, String, String)| {
        if e.0 != e.2 && seen_edges.insert(e.clone()) {
            edges.push(e);
        }
    };

    let mut other: BTreeSet<String> = BTreeSet::new();
    if cfg.use_paths {
        for path in query_paths(store, &topics.all(), cfg.max_hops, cfg.max_paths) {
            for hop in &path {
                let t = store.triple(hop.triple);
                other.insert(t.head.clone());
                other.insert(t.tail.clone());
                push_edge(&mut edges, (t.head.clone(), t.relation.clone(), t.tail.clone()));
            }
        }
    }

    for q in &topics.question {
        for c in &c_set {
            push_edge(&mut edges, (q.clone(), RELATED_QA.to_string(), c.to_string()));
        }
    }

    let mut para_nodes: BTreeSet<String> = BTreeSet::new();
    if cfg.paraphrase_nodes {
        let topic_order: Vec<&str> = topics.question.iter().map(String::as_str).chain(c_set.iter().copied()).collect();
        for t in topic_order {
            if let Some(def) = para.get(t) {
                for h in match_entities(def, store) {
                    if h != t {
                        para_nodes.insert(h.clone());
                        push_edge(&mut edges, (t.to_string(), DEF_TOP.to_string(), h));
                    }
                }
            }
        }
    }

    let mut nodes: Vec<EvidenceNode> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut add = |nodes: &mut Vec<EvidenceNode>, s: &str, t: NodeType| {
        if !index.contains_key(s) {
            index.insert(s.to_string(), nodes.len());
            nodes.push(EvidenceNode { id: nodes.len(), surface: s.to_string(), node_type: t, relevance: 0.5 });
        }
    };
    for q in &topics.question {
        add(&mut nodes, q, NodeType::Question);
    }
    for (c, _) in &topics.choices {
        add(&mut nodes, c, NodeType::Choice);
    }
    for h in &para_nodes {
        add(&mut nodes, h, NodeType::Paraphrase);
    }
    for o in &other {
        add(&mut nodes, o, NodeType::Other);
    }
    let lookup: HashMap<&str, usize> = nodes.iter().map(|n| (n.surface.as_str(), n.id)).collect();
    let edges = edges
        .into_iter()
        .map(|(h, r, t)| EvidenceEdge { head: lookup[h.as_str()], tail: lookup[t.as_str()], relation: r })
        .collect();
    EvidenceGraph { question: question.to_string(), nodes, edges }
}

/// `σ(f_λ([φ(surface); φ(question)]))` per node, on the tape. `phi_nodes` is
/// `N × H`, `phi_question` is `1 × H`; returns an `N × 1` column.
pub fn relevance_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    scorer: &Linear,
    phi_nodes: gsap_autograd::Var,
    phi_question: gsap_autograd::Var,
) -> gsap_autograd::Var {
    let n = tape.shape(phi_nodes).0;
    let q = tape.gather_rows(phi_question, &vec![0; n]);
    let x = tape.concat_cols(&[phi_nodes, q]);
    let logit = scorer.forward(tape, store, x);
    tape.sigmoid(logit)
}

/// Sets every node's relevance from the scorer.
pub fn score_relevance(g: &mut EvidenceGraph, phi_nodes: &Mat, phi_question: &Mat, scorer: &Linear, store: &ParamStore) {
    let mut tape = Tape::new();
    let pn = tape.constant(phi_nodes.clone());
    let pq = tape.constant(phi_question.clone());
    let lam = relevance_on_tape(&mut tape, store, scorer, pn, pq);
    for (node, &v) in g.nodes.iter_mut().zip(tape.value(lam).data()) {
        node.relevance = v.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
    }
}

/// Ids of the nodes that survive pruning, ascending.
pub fn prune_keep(g: &EvidenceGraph, threshold: f64) -> Vec<usize> {
    g.nodes
        .iter()
        .filter(|n| n.node_type.is_topic() || n.relevance >= threshold)
        .map(|n| n.id)
        .collect()
}

/// Drops non-topic nodes with relevance below `threshold`, with their edges.
pub fn prune(g: &EvidenceGraph, threshold: f64) -> EvidenceGraph {
    assert!((0.0..1.0).contains(&threshold), "threshold must lie in [0, 1)");
    g.induced(&prune_keep(g, threshold))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub head: usize,
    pub relation: String,
    pub tail: usize,
    /// Index of the edge in the graph this triplet came from.
    pub edge: usize,
}

/// Distances from `src` over non-`RelatedQA` edges.
fn bfs(adj: &[Vec<(usize, usize)>], src: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; adj.len()];
    dist[src] = 0;
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        for &(v, _) in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Edges lying on a shortest (≤ 2 edge) question-to-choice path, ignoring the
/// `RelatedQA` shortcuts, plus every `RelatedQA` edge. Ordered by descending
/// min endpoint relevance, then by `(head, relation, tail)` surfaces.
pub fn select_qc_triplets(g: &EvidenceGraph) -> Vec<Triplet> {
    let n = g.nodes.len();
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (i, e) in g.edges.iter().enumerate() {
        if e.relation != RELATED_QA {
            adj[e.head].push((e.tail, i));
            adj[e.tail].push((e.head, i));
        }
    }
    let qs: Vec<usize> = g.nodes_of(NodeType::Question).map(|n| n.id).collect();
    let cs: Vec<usize> = g.nodes_of(NodeType::Choice).map(|n| n.id).collect();
    let from_c: BTreeMap<usize, Vec<usize>> = cs.iter().map(|&c| (c, bfs(&adj, c))).collect();

    let mut chosen: BTreeSet<usize> = BTreeSet::new();
    for &q in &qs {
        let dq = bfs(&adj, q);
        for &c in &cs {
            let d = dq[c];
            if d == usize::MAX || d > 2 {
                continue;
            }
            let dc = &from_c[&c];
            for (i, e) in g.edges.iter().enumerate() {
                if e.relation == RELATED_QA {
                    continue;
                }
                let (a, b) = (e.head, e.tail);
                let on = |x: usize, y: usize| {
                    dq[x] != usize::MAX && dc[y] != usize::MAX && dq[x] + 1 + dc[y] == d
                };
                if on(a, b) || on(b, a) {
                    chosen.insert(i);
                }
            }
        }
    }
    for (i, e) in g.edges.iter().enumerate() {
        if e.relation == RELATED_QA {
            chosen.insert(i);
        }
    }
    let mut out: Vec<Triplet> = chosen
        .into_iter()
        .map(|i| {
            let e = &g.edges[i];
            Triplet { head: e.head, relation: e.relation.clone(), tail: e.tail, edge: i }
        })
        .collect();
    out.sort_by(|a, b| {
        let ra = g.nodes[a.head].relevance.min(g.nodes[a.tail].relevance);
        let rb = g.nodes[b.head].relevance.min(g.nodes[b.tail].relevance);
        rb.total_cmp(&ra)
            .then_with(|| g.nodes[a.head].surface.cmp(&g.nodes[b.head].surface))
            .then_with(|| a.relation.cmp(&b.relation))
            .then_with(|| g.nodes[a.tail].surface.cmp(&g.nodes[b.tail].surface))
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn store(lines: &str) -> TripleStore {
        TripleStore::parse(lines, &PathBuf::from("kg.tsv")).unwrap()
    }

    fn topics(q: &[&str], c: &[&str]) -> TopicEntities {
        TopicEntities {
            question: q.iter().map(|s| s.to_string()).collect(),
            choices: c.iter().map(|s| (s.to_string(), 0)).collect(),
        }
    }

    #[test]
    fn grounds_plural_question_tokens() {
        let s = store("cat\tDesires\tmilk\ndrink\tRelatedTo\tmilk\n");
        let t = extract_topic_entities("what do cats drink", &["milk".into()], &s).unwrap();
        assert_eq!(t.question, vec!["cat", "drink"]);
        assert_eq!(t.choices, vec![("milk".to_string(), 0)]);
    }

    #[test]
    fn longest_match_wins() {
        let s = store("ice cream\tIsA\tdessert\nice\tIsA\twater\ncream\tIsA\tdairy\n");
        assert_eq!(match_entities("I like ice cream a lot", &s), vec!["ice cream"]);
    }

    #[test]
    fn ungrounded_question_is_an_error() {
        let s = store("cat\tIsA\tanimal\n");
        let err = extract_topic_entities("nothing here", &["cat".into()], &s).unwrap_err();
        assert!(matches!(err, GsapError::QuestionUngrounded(_)));
    }

    #[test]
    fn minimal_graph_has_one_related_qa_edge() {
        let s = TripleStore::default();
        let g = build_graph("a?", &topics(&["a"], &["b"]), &s, &ParaphraseDict::new(), &GraphConfig::default());
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[0].relation, RELATED_QA);
        assert_eq!((g.edges[0].head, g.edges[0].tail), (0, 1));
    }

    #[test]
    fn paraphrase_entity_gets_def_top_edge() {
        let s = store("cat\tIsA\tpet\nanimal\tIsA\tliving thing\nmilk\tIsA\tdrink\n");
        let mut d = ParaphraseDict::new();
        d.insert("cat", "a small animal with fur");
        let cfg = GraphConfig { use_paths: false, ..GraphConfig::default() };
        let g = build_graph("cat?", &topics(&["cat"], &["milk"]), &s, &d, &cfg);
        let idx = g.node_index();
        let animal = idx["animal"];
        assert_eq!(g.nodes[animal].node_type, NodeType::Paraphrase);
        assert!(g.edges.iter().any(|e| e.relation == DEF_TOP && e.head == idx["cat"] && e.tail == animal));
    }

    #[test]
    fn prune_drops_low_other_nodes_only() {
        let s = store("q\tr\tm\nm\tr\tc\n");
        let mut g = build_graph("q", &topics(&["q"], &["c"]), &s, &ParaphraseDict::new(), &GraphConfig::default());
        let (m, q) = { let idx = g.node_index(); (idx["m"], idx["q"]) };
        g.nodes[m].relevance = 0.05;
        g.nodes[q].relevance = 0.01;
        let p = prune(&g, 0.1);
        assert_eq!(p.nodes.len(), 2);
        assert!(p.validate().is_ok());
        assert_eq!(p.edges.len(), 1);
        // unchanged when everything clears the bar
        g.nodes[m].relevance = 0.5;
        assert_eq!(prune(&g, 0.1), g);
    }

    #[test]
    fn related_qa_only_triplet() {
        let g = build_graph("q", &topics(&["q"], &["c"]), &TripleStore::default(), &ParaphraseDict::new(), &GraphConfig::default());
        let t = select_qc_triplets(&g);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].relation, RELATED_QA);
    }

    #[test]
    fn chain_triplets() {
        let s = store("q\tr1\tm\nm\tr2\tc\n");
        let g = build_graph("q", &topics(&["q"], &["c"]), &s, &ParaphraseDict::new(), &GraphConfig::default());
        let t = select_qc_triplets(&g);
        let named: BTreeSet<(String, String, String)> = t
            .iter()
            .map(|t| (g.nodes[t.head].surface.clone(), t.relation.clone(), g.nodes[t.tail].surface.clone()))
            .collect();
        let expected: BTreeSet<(String, String, String)> = [("q", "r1", "m"), ("m", "r2", "c"), ("q", RELATED_QA, "c")]
            .iter()
            .map(|(a, b, c)| (a.to_string(), b.to_string(), c.to_string()))
            .collect();
        assert_eq!(named, expected);
    }
}
