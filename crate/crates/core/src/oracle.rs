//! Reference computations used to audit the main code paths: a dense
//! loop-based graph encoder, a brute-force pruner, a loss oracle, random graph
//! fixtures and finite-difference gradient checks of whole components.

use std::collections::{BTreeMap, BTreeSet};

use gsap_autograd::{check_params, GradCheckReport, Mat, ParamStore, Tape};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderConfig, FrozenEncoder, Injection};
use crate::gnn::{GnnConfig, GnnOptions, GraphEncoder, GraphInput};
use crate::graph::{EvidenceEdge, EvidenceGraph, EvidenceNode, NodeType};
use crate::hmpr::{Hmpr, HmprConfig, HmprFlags};
use crate::nn::Linear;
use crate::prompt::{PromptConfig, PromptFlags, PromptGenerator, TripletRef};

const ALL_TYPES: [NodeType; 4] = [NodeType::Question, NodeType::Choice, NodeType::Other, NodeType::Paraphrase];

/// A graph of 1..=`max_nodes` nodes with at least one question node, random
/// types, relevances and edges over `relations`.
pub fn random_graph<R: Rng + ?Sized>(rng: &mut R, max_nodes: usize, relations: &[String]) -> EvidenceGraph {
    let n = rng.random_range(1..=max_nodes);
    let nodes = (0..n)
        .map(|i| EvidenceNode {
            id: i,
            surface: format!("node{i}"),
            node_type: if i == 0 { NodeType::Question } else { *ALL_TYPES.choose(rng).unwrap() },
            relevance: rng.random::<f64>(),
        })
        .collect();
    let mut edges = Vec::new();
    if n > 1 {
        let m = rng.random_range(0..=2 * n);
        for _ in 0..m {
            let head = rng.random_range(0..n);
            let tail = rng.random_range(0..n);
            if head != tail {
                edges.push(EvidenceEdge { head, tail, relation: relations.choose(rng).unwrap().clone() });
            }
        }
    }
    EvidenceGraph { question: "random".into(), nodes, edges }
}

fn affine_loop(x: &[f64], w: &Mat, b: Option<&Mat>) -> Vec<f64> {
    (0..w.cols())
        .map(|j| {
            let mut acc = b.map_or(0.0, |b| b.get(0, j));
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w.get(i, j);
            }
            acc
        })
        .collect()
}

fn apply(lin: &Linear, store: &ParamStore, x: &[f64]) -> Vec<f64> {
    affine_loop(x, store.get(lin.w), lin.b.map(|b| store.get(b)))
}

fn one_hot(len: usize, hot: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; len];
    for &h in hot {
        v[h] = 1.0;
    }
    v
}

#[derive(Clone, Debug)]
pub struct DenseOutput {
    pub states: Mat,
    pub pooled: Mat,
    /// Per layer and receiver `n`, the weight of one `u → n` channel keyed by
    /// `(relation, u)`; self channels use the reserved relation id.
    pub attention: Vec<Vec<BTreeMap<(usize, usize), f64>>>,
}

/// Evaluation-mode encoder written with a dense `relation × sender ×
/// receiver` multiplicity tensor and explicit loops.
pub fn oracle_dense_gnn(
    g: &EvidenceGraph,
    relation_vocab: &[String],
    enc: &GraphEncoder,
    store: &ParamStore,
    h0: &Mat,
    lambda: &[f64],
) -> DenseOutput {
    let n = g.nodes.len();
    let d = enc.cfg.dim;
    let nr = relation_vocab.len() + 1;
    let tc = NodeType::COUNT;
    let type_idx = |t: NodeType| ALL_TYPES.iter().position(|&x| x == t).unwrap();
    let mut adj = vec![vec![vec![0usize; n]; n]; nr];
    for e in &g.edges {
        let r = relation_vocab.iter().position(|x| *x == e.relation).expect("known relation");
        adj[r][e.head][e.tail] += 1;
        adj[r][e.tail][e.head] += 1;
    }
    for i in 0..n {
        adj[nr - 1][i][i] += 1;
    }
    let v: Vec<Vec<f64>> = g.nodes.iter().map(|x| apply(&enc.node_type, store, &one_hot(tc, &[type_idx(x.node_type)]))).collect();
    let rel = |u: usize, t: usize, r: usize| {
        let x = one_hot(2 * tc + nr, &[type_idx(g.nodes[u].node_type), tc + type_idx(g.nodes[t].node_type), 2 * tc + r]);
        apply(&enc.rel_type, store, &x)
    };
    let lam: Vec<Vec<f64>> = lambda.iter().map(|&l| apply(&enc.lambda, store, &[l])).collect();
    let mut h: Vec<Vec<f64>> = (0..n).map(|i| h0.row(i).to_vec()).collect();
    let mut attention = Vec::new();
    for lyr in &enc.layers {
        let mut next = h.clone();
        let mut att_l = Vec::with_capacity(n);
        for t in 0..n {
            let mut scores: Vec<(usize, usize, usize, f64, Vec<f64>)> = Vec::new();
            for (r, plane) in adj.iter().enumerate() {
                for u in 0..n {
                    let mult = plane[u][t];
                    if mult == 0 {
                        continue;
                    }
                    let ruv = rel(u, t, r);
                    let q = apply(&lyr.query, store, &[h[u].clone(), v[u].clone(), lam[u].clone()].concat());
                    let k = apply(&lyr.key, store, &[h[t].clone(), v[t].clone(), lam[t].clone(), ruv.clone()].concat());
                    let s: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
                    let m = apply(&lyr.message, store, &[h[u].clone(), v[u].clone(), ruv].concat());
                    scores.push((r, u, mult, s, m));
                }
            }
            let max = scores.iter().map(|x| x.3).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|x| x.2 as f64 * (x.3 - max).exp()).sum();
            let mut agg = vec![0.0; d];
            let mut att = BTreeMap::new();
            for (r, u, mult, s, m) in &scores {
                let a = (s - max).exp() / z;
                att.insert((*r, *u), a);
                for j in 0..d {
                    agg[j] += *mult as f64 * a * m[j];
                }
            }
            let up = apply(&lyr.update, store, &agg);
            let (rm, rv) = (store.get(lyr.running_mean), store.get(lyr.running_var));
            let (gamma, beta) = (store.get(lyr.norm.gamma), store.get(lyr.norm.beta));
            for j in 0..d {
                let normed = (up[j] - rm.get(0, j)) / (rv.get(0, j) + enc.cfg.bn_eps).sqrt();
                next[t][j] = h[t][j] + gamma.get(0, j) * normed + beta.get(0, j);
            }
            att_l.push(att);
        }
        h = next;
        attention.push(att_l);
    }
    let mut pooled = vec![0.0; d];
    for row in &h {
        for j in 0..d {
            pooled[j] += row[j] / n as f64;
        }
    }
    DenseOutput { states: Mat::from_rows(&h), pooled: Mat::row_vector(pooled), attention }
}

/// Surfaces and `(head, relation, tail)` surface triples that survive pruning,
/// by direct filtering.
pub fn oracle_prune(g: &EvidenceGraph, threshold: f64) -> (BTreeSet<String>, BTreeSet<(String, String, String)>) {
    let keep = |n: &EvidenceNode| n.node_type.is_topic() || n.relevance >= threshold;
    let nodes: BTreeSet<String> = g.nodes.iter().filter(|n| keep(n)).map(|n| n.surface.clone()).collect();
    let edges = g
        .edges
        .iter()
        .filter(|e| keep(&g.nodes[e.head]) && keep(&g.nodes[e.tail]))
        .map(|e| (g.nodes[e.head].surface.clone(), e.relation.clone(), g.nodes[e.tail].surface.clone()))
        .collect();
    (nodes, edges)
}

/// `−log softmax(scores)[gold]` via a compensated log-sum-exp.
pub fn oracle_cross_entropy(scores: &[f64], gold: usize) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &s in scores {
        let y = (s - max).exp() - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    max + sum.ln() - scores[gold]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Linear,
    GraphEncoder,
    Prompt,
    Hmpr,
}

fn tiny_vocab() -> Vec<String> {
    vec!["DefTop".into(), "RelatedQA".into(), "IsA".into(), "AtLocation".into()]
}

/// Central-difference check of every trainable parameter of `component` at
/// tiny dimensions, through a scalar loss built on its output.
pub fn grad_check(component: Component, eps: f64, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    match component {
        Component::Linear => {
            let lin = Linear::new(&mut store, "lin", 3, 2, true, gsap_autograd::Group::Graph, &mut rng);
            let x = Mat::randn(4, 3, 1.0, &mut rng);
            let w = Mat::randn(4, 2, 1.0, &mut rng);
            let loss = |s: &ParamStore, grad: bool| {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let y = lin.forward(&mut tape, s, xv);
                let wv = tape.constant(w.clone());
                let y = tape.mul(y, wv);
                let l = tape.sum_all(y);
                (tape.scalar(l), grad.then(|| tape.backward(l).into_params()))
            };
            finish(&mut store, &lin.params(), eps, loss)
        }
        Component::GraphEncoder => {
            let vocab = tiny_vocab();
            let enc = GraphEncoder::new(&mut store, "gnn", GnnConfig::new(3, 2, vocab.len()), &mut rng);
            // evaluation-mode normalization: with batch statistics the biases
            // feeding the normalization have exactly zero gradient
            for l in &enc.layers {
                store.set(l.running_mean, Mat::randn(1, 3, 0.5, &mut rng));
                store.set(l.running_var, Mat::uniform(1, 3, 1.0, &mut rng).map(|v| v.abs() + 0.5));
            }
            let g = loop {
                let g = random_graph(&mut rng, 6, &vocab);
                if g.nodes.len() >= 4 && !g.edges.is_empty() {
                    break g;
                }
            };
            let input = GraphInput::from_graph(&g, &vocab).unwrap();
            let h0 = Mat::randn(g.nodes.len(), 3, 1.0, &mut rng);
            let w = Mat::randn(g.nodes.len(), 3, 1.0, &mut rng);
            let wp = Mat::randn(1, 3, 1.0, &mut rng);
            let lam = Mat::col_vector(g.relevances());
            let loss = |s: &ParamStore, grad: bool| {
                let mut tape = Tape::new();
                let h = tape.constant(h0.clone());
                let l = tape.constant(lam.clone());
                let out = enc.encode(&mut tape, s, &input, h, l, GnnOptions::default()).unwrap();
                let wv = tape.constant(w.clone());
                let a = tape.mul(out.states, wv);
                let a = tape.sum_all(a);
                let wpv = tape.constant(wp.clone());
                let b = tape.mul(out.pooled, wpv);
                let b = tape.sum_all(b);
                let total = tape.add(a, b);
                (tape.scalar(total), grad.then(|| tape.backward(total).into_params()))
            };
            finish(&mut store, &enc.params(), eps, loss)
        }
        Component::Prompt => {
            let ecfg = EncoderConfig { hidden: 4, layers: 2, heads: 2, ffn: 6, max_len: 32, ln_eps: 1e-5 };
            let encoder = FrozenEncoder::new(&mut store, ecfg, 10, &mut rng);
            let pcfg = PromptConfig { k: 6, layers: 2, hidden: 4, graph_dim: 3, inner: 5, num_relations: 4 };
            let gen = PromptGenerator::new(&mut store, pcfg, &mut rng);
            let states = Mat::randn(5, 3, 1.0, &mut rng);
            let gvec = Mat::randn(1, 3, 1.0, &mut rng);
            let triplets = [
                TripletRef { head: 0, relation: 1, tail: 2 },
                TripletRef { head: 0, relation: 2, tail: 3 },
                TripletRef { head: 4, relation: 3, tail: 2 },
            ];
            let tokens = [2, 5, 6, 7, 3, 8, 3];
            let w = Mat::randn(6 + tokens.len(), 4, 1.0, &mut rng);
            let loss = |s: &ParamStore, grad: bool| {
                let mut tape = Tape::new();
                let st = tape.constant(states.clone());
                let gv = tape.constant(gvec.clone());
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let set = gen.generate(&mut tape, s, &triplets, st, gv, PromptFlags::default(), &mut r);
                let out = encoder.encode(&mut tape, s, &tokens, &Injection { layers: set.layers }).unwrap();
                let wv = tape.constant(w.clone());
                let y = tape.mul(out.last, wv);
                let l = tape.sum_all(y);
                (tape.scalar(l), grad.then(|| tape.backward(l).into_params()))
            };
            finish(&mut store, &gen.params(), eps, loss)
        }
        Component::Hmpr => {
            let cfg = HmprConfig { hidden: 4, graph_dim: 3, fuse: 2, gru_hidden: 3 };
            let hmpr = Hmpr::new(&mut store, cfg, &mut rng);
            let segs: Vec<Mat> = (0..3).map(|_| Mat::randn(3, 4, 1.0, &mut rng)).collect();
            let g = Mat::randn(3, 3, 1.0, &mut rng);
            let h0 = Mat::randn(4, 3, 1.0, &mut rng);
            let outs = [Mat::randn(1, 4, 1.0, &mut rng), Mat::randn(1, 4, 1.0, &mut rng)];
            let wr = Mat::randn(4, 3, 1.0, &mut rng);
            let loss = |s: &ParamStore, grad: bool| {
                let mut tape = Tape::new();
                let sv = [0, 1, 2].map(|i| tape.constant(segs[i].clone()));
                let gv = tape.constant(g.clone());
                let fusion = hmpr.forward(&mut tape, s, sv, gv, HmprFlags::default());
                let logits = tape.transpose(fusion.logits);
                let ce = tape.cross_entropy(logits, 1);
                // the refresh projection is exercised separately
                let hv = tape.constant(h0.clone());
                let o: Vec<_> = outs.iter().map(|m| tape.constant(m.clone())).collect();
                let fresh = hmpr.refresh_states(&mut tape, s, hv, &[(1, o[0]), (1, o[1]), (3, o[0])]);
                let wv = tape.constant(wr.clone());
                let r = tape.mul(fresh, wv);
                let r = tape.sum_all(r);
                let total = tape.add(ce, r);
                (tape.scalar(total), grad.then(|| tape.backward(total).into_params()))
            };
            finish(&mut store, &hmpr.params(), eps, loss)
        }
    }
}

fn finish(
    store: &mut ParamStore,
    ids: &[gsap_autograd::ParamId],
    eps: f64,
    loss: impl Fn(&ParamStore, bool) -> (f64, Option<BTreeMap<gsap_autograd::ParamId, Mat>>),
) -> GradCheckReport {
    let analytic = loss(store, true).1.expect("gradients requested");
    check_params(store, ids, eps, &analytic, |s| loss(s, false).0)
}
