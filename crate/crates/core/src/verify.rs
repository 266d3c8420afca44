//! Numerical self-checks. Each `measure_*` returns the raw discrepancy so
//! callers can apply their own tolerance; [`run_all`] applies the defaults.

use std::collections::BTreeSet;

use gsap_autograd::{Mat, ParamStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderConfig, FrozenEncoder, Injection};
use crate::gnn::{GnnConfig, GnnOptions, GraphEncoder, GraphInput};
use crate::graph::{prune, EvidenceGraph};
use crate::oracle::{grad_check, oracle_cross_entropy, oracle_dense_gnn, oracle_prune, random_graph, Component};

pub fn relation_fixture() -> Vec<String> {
    ["DefTop", "RelatedQA", "IsA", "AtLocation", "UsedFor"].map(String::from).to_vec()
}

fn encoder_fixture(rng: &mut ChaCha8Rng, dim: usize, layers: usize) -> (ParamStore, GraphEncoder) {
    let mut store = ParamStore::new();
    let enc = GraphEncoder::new(&mut store, "gnn", GnnConfig::new(dim, layers, relation_fixture().len()), rng);
    // non-trivial running statistics so the evaluation normalization is exercised
    for l in &enc.layers {
        store.set(l.running_mean, Mat::randn(1, dim, 0.5, rng));
        store.set(l.running_var, Mat::uniform(1, dim, 1.0, rng).map(|v| v.abs() + 0.5));
        store.set(l.norm.gamma, Mat::randn(1, dim, 1.0, rng));
        store.set(l.norm.beta, Mat::randn(1, dim, 0.5, rng));
    }
    (store, enc)
}

fn main_path(enc: &GraphEncoder, store: &ParamStore, g: &EvidenceGraph, h0: &Mat, train: bool) -> (Mat, Mat, GraphInput, Vec<Mat>) {
    let input = GraphInput::from_graph(g, &relation_fixture()).unwrap();
    let mut tape = Tape::new();
    let h = tape.constant(h0.clone());
    let l = tape.constant(Mat::col_vector(g.relevances()));
    let out = enc.encode(&mut tape, store, &input, h, l, GnnOptions { train, uniform_attention: false }).unwrap();
    (tape.value(out.states).clone(), tape.value(out.pooled).clone(), input, out.attention)
}

/// Largest state or pooled difference between the encoder and the dense
/// oracle over `graphs` random graphs of at most `max_nodes` nodes.
pub fn measure_gnn_oracle(seed: u64, graphs: usize, max_nodes: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (store, enc) = encoder_fixture(&mut rng, 6, 3);
    let mut worst: f64 = 0.0;
    for _ in 0..graphs {
        let g = random_graph(&mut rng, max_nodes, &relation_fixture());
        let h0 = Mat::randn(g.nodes.len(), 6, 1.0, &mut rng);
        let (states, pooled, _, _) = main_path(&enc, &store, &g, &h0, false);
        let dense = oracle_dense_gnn(&g, &relation_fixture(), &enc, &store, &h0, &g.relevances());
        worst = worst.max(states.max_abs_diff(&dense.states)).max(pooled.max_abs_diff(&dense.pooled));
    }
    worst
}

/// Largest `|Σ α − 1|` over receivers, across `samples` (graph, layer) pairs.
pub fn measure_attention_sums(seed: u64, samples: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = 3;
    let (store, enc) = encoder_fixture(&mut rng, 5, layers);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < samples {
        let g = random_graph(&mut rng, 10, &relation_fixture());
        let h0 = Mat::randn(g.nodes.len(), 5, 1.0, &mut rng);
        let train = rng.random::<bool>() && g.nodes.len() > 1;
        let (_, _, input, att) = main_path(&enc, &store, &g, &h0, train);
        for a in att.iter().take(samples - done) {
            let mut sums = vec![0.0; input.node_count()];
            for (c, &r) in input.receivers.iter().enumerate() {
                sums[r] += a.get(c, 0);
            }
            worst = sums.iter().fold(worst, |w, s| w.max((s - 1.0).abs()));
            done += 1;
        }
    }
    worst
}

/// Worst relative gradient error for each audited component.
pub fn measure_gradients(eps: f64, seed: u64) -> Vec<(Component, f64)> {
    [Component::GraphEncoder, Component::Prompt, Component::Hmpr]
        .into_iter()
        .map(|c| (c, grad_check(c, eps, seed).max_rel_error))
        .collect()
}

/// Number of random graphs where pruning disagrees with the filter oracle
/// or is not idempotent, at random thresholds plus 0.1.
pub fn count_prune_mismatches(seed: u64, graphs: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for i in 0..graphs {
        let g = random_graph(&mut rng, 10, &relation_fixture());
        let thr = if i % 2 == 0 { 0.1 } else { rng.random_range(0.0..1.0) };
        let p = prune(&g, thr);
        let nodes: BTreeSet<String> = p.nodes.iter().map(|n| n.surface.clone()).collect();
        let edges: BTreeSet<(String, String, String)> = p
            .edges
            .iter()
            .map(|e| (p.nodes[e.head].surface.clone(), e.relation.clone(), p.nodes[e.tail].surface.clone()))
            .collect();
        let again = prune(&p, thr);
        if (nodes, edges) != oracle_prune(&g, thr) || again != p || p.validate().is_err() {
            bad += 1;
        }
    }
    bad
}

/// `(|CE(uniform 5) − ln 5|, CE of a near-certain prediction, worst shift discrepancy)`.
pub fn measure_loss_analytics(seed: u64) -> (f64, f64, f64) {
    let ce = |scores: &[f64], gold: usize| {
        let mut tape = Tape::new();
        let v = tape.constant(Mat::row_vector(scores.to_vec()));
        let l = tape.cross_entropy(v, gold);
        tape.scalar(l)
    };
    let uniform = (ce(&[0.4; 5], 3) - 5f64.ln()).abs();
    let perfect = ce(&[40.0, 0.0, 0.0, 0.0, 0.0], 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shift: f64 = 0.0;
    for _ in 0..200 {
        let b = rng.random_range(2..=5);
        let s: Vec<f64> = (0..b).map(|_| rng.random_range(-5.0..5.0)).collect();
        let c = rng.random_range(-100.0..100.0);
        let moved: Vec<f64> = s.iter().map(|x| x + c).collect();
        let gold = rng.random_range(0..b);
        shift = shift.max((ce(&s, gold) - ce(&moved, gold)).abs()).max((ce(&s, gold) - oracle_cross_entropy(&s, gold)).abs());
    }
    (uniform, perfect, shift)
}

/// Count of random token sequences whose unprompted encoding differs in any
/// bit from the plain forward pass.
pub fn count_unprompted_mismatches(seed: u64, sequences: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = EncoderConfig { hidden: 8, layers: 3, heads: 2, ffn: 16, max_len: 64, ln_eps: 1e-5 };
    let enc = FrozenEncoder::new(&mut store, cfg, 40, &mut rng);
    (0..sequences)
        .filter(|_| {
            let len = rng.random_range(1..=64);
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..40)).collect();
            let plain = enc.forward_plain(&store, &tokens).unwrap();
            let mut tape = Tape::new();
            let out = enc.encode(&mut tape, &store, &tokens, &Injection::none()).unwrap();
            let taped = tape.value(out.last);
            taped.shape() != plain.shape()
                || taped.data().iter().zip(plain.data()).any(|(a, b)| a.to_bits() != b.to_bits())
        })
        .count()
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check { name: name.into(), passed, detail }
}

pub fn run_all(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let d = measure_gnn_oracle(seed, 100, 10);
    out.push(check("graph encoder vs dense oracle", d < 1e-6, format!("max abs diff {d:.3e}")));
    let a = measure_attention_sums(seed, 1000);
    out.push(check("attention normalization", a < 1e-6, format!("max |sum - 1| {a:.3e}")));
    for (c, e) in measure_gradients(1e-5, seed) {
        out.push(check(&format!("gradients {c:?}"), e < 1e-4, format!("max rel error {e:.3e}")));
    }
    let p = count_prune_mismatches(seed, 200);
    out.push(check("pruning vs filter oracle", p == 0, format!("{p} mismatching graphs")));
    let (u, pf, s) = measure_loss_analytics(seed);
    out.push(check(
        "loss analytics",
        u < 1e-9 && pf < 1e-6 && s < 1e-9,
        format!("|uniform - ln5| {u:.1e}, perfect {pf:.1e}, shift {s:.1e}"),
    ));
    let m = count_unprompted_mismatches(seed, 20);
    out.push(check("unprompted encoder bit identity", m == 0, format!("{m} differing sequences")));
    out
}
