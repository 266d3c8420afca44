//! Relational graph attention encoder.
//!
//! Every undirected edge becomes two directed channels and every node gets a
//! self channel, so one layer is a handful of dense ops over the channel list:
//! gather sender/receiver rows, score, segment-softmax by receiver, scatter.

use gsap_autograd::{BatchStats, Group, Mat, ParamId, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GsapError, Result};
use crate::graph::{EvidenceGraph, NodeType};
use crate::nn::{Affine, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    /// Hidden width of node states and of every map inside a layer.
    pub dim: usize,
    pub layers: usize,
    /// Size of the relation vocabulary; one extra id is reserved for self channels.
    pub num_relations: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl GnnConfig {
    pub fn new(dim: usize, layers: usize, num_relations: usize) -> Self {
        Self { dim, layers, num_relations, bn_eps: 1e-5, bn_momentum: 0.1 }
    }

    pub fn self_relation(&self) -> usize {
        self.num_relations
    }

    /// Width of the relation one-hot input: sender type, receiver type, relation.
    pub fn rel_input_dim(&self) -> usize {
        2 * NodeType::COUNT + self.num_relations + 1
    }
}

/// Message-passing structure of one or more disjoint graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInput {
    pub node_types: Vec<NodeType>,
    /// Graph index of every node; pooling is per graph.
    pub component: Vec<usize>,
    pub components: usize,
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
    pub relations: Vec<usize>,
}

impl GraphInput {
    pub fn node_count(&self) -> usize {
        self.node_types.len()
    }

    pub fn channel_count(&self) -> usize {
        self.senders.len()
    }

    /// Joins `graphs` block-diagonally. Edge channels come first (both
    /// directions, in edge order), then one self channel per node.
    pub fn from_graphs(graphs: &[&EvidenceGraph], relation_vocab: &[String]) -> Result<Self> {
        let mut out = GraphInput {
            node_types: Vec::new(),
            component: Vec::new(),
            components: graphs.len(),
            senders: Vec::new(),
            receivers: Vec::new(),
            relations: Vec::new(),
        };
        let mut offset = 0;
        for (gi, g) in graphs.iter().enumerate() {
            for n in &g.nodes {
                out.node_types.push(n.node_type);
                out.component.push(gi);
            }
            for e in &g.edges {
                let r = relation_vocab
                    .iter()
                    .position(|l| *l == e.relation)
                    .ok_or_else(|| GsapError::UnknownRelation(e.relation.clone()))?;
                for (s, t) in [(e.head, e.tail), (e.tail, e.head)] {
                    out.senders.push(offset + s);
                    out.receivers.push(offset + t);
                    out.relations.push(r);
                }
            }
            offset += g.nodes.len();
        }
        let self_rel = relation_vocab.len();
        for i in 0..offset {
            out.senders.push(i);
            out.receivers.push(i);
            out.relations.push(self_rel);
        }
        Ok(out)
    }

    pub fn from_graph(g: &EvidenceGraph, relation_vocab: &[String]) -> Result<Self> {
        Self::from_graphs(&[g], relation_vocab)
    }

    /// One-hot rows `[type(sender); type(receiver); relation]`, one per channel.
    pub fn relation_features(&self, cfg: &GnnConfig) -> Mat {
        let mut m = Mat::zeros(self.channel_count(), cfg.rel_input_dim());
        for c in 0..self.channel_count() {
            m.set(c, self.node_types[self.senders[c]].index(), 1.0);
            m.set(c, NodeType::COUNT + self.node_types[self.receivers[c]].index(), 1.0);
            m.set(c, 2 * NodeType::COUNT + self.relations[c], 1.0);
        }
        m
    }

    pub fn type_features(&self) -> Mat {
        let mut m = Mat::zeros(self.node_count(), NodeType::COUNT);
        for (i, t) in self.node_types.iter().enumerate() {
            m.set(i, t.index(), 1.0);
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct GnnLayer {
    pub message: Linear,
    pub query: Linear,
    pub key: Linear,
    pub update: Linear,
    pub norm: Affine,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Clone, Debug)]
pub struct GraphEncoder {
    pub cfg: GnnConfig,
    pub node_type: Linear,
    pub rel_type: Linear,
    pub lambda: Linear,
    pub layers: Vec<GnnLayer>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GnnOptions {
    /// Batch statistics inside the update (running statistics otherwise).
    pub train: bool,
    /// Replace attention by a uniform average over each receiver's channels.
    pub uniform_attention: bool,
}

#[derive(Debug)]
pub struct GraphEncoding {
    /// `components × dim` mean-pooled final states.
    pub pooled: Var,
    /// `nodes × dim` final states.
    pub states: Var,
    /// Per layer, the `channels × 1` attention weights.
    pub attention: Vec<Mat>,
    /// Per layer, batch statistics when they were used.
    pub batch_stats: Vec<Option<BatchStats>>,
}

impl GraphEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: GnnConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let g = Group::Graph;
        let node_type = Linear::new(store, &format!("{prefix}.f_v"), NodeType::COUNT, d, true, g, rng);
        let rel_type = Linear::new(store, &format!("{prefix}.f_r"), cfg.rel_input_dim(), d, true, g, rng);
        let lambda = Linear::new(store, &format!("{prefix}.f_lambda"), 1, d, true, g, rng);
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                GnnLayer {
                    message: Linear::new(store, &format!("{p}.message"), 3 * d, d, true, g, rng),
                    query: Linear::new(store, &format!("{p}.query"), 3 * d, d, true, g, rng),
                    key: Linear::new(store, &format!("{p}.key"), 4 * d, d, true, g, rng),
                    update: Linear::new(store, &format!("{p}.update"), d, d, true, g, rng),
                    norm: Affine::new(store, &format!("{p}.bn"), d, g),
                    running_mean: store.add(format!("{p}.bn.running_mean"), Mat::zeros(1, d), Group::Buffer),
                    running_var: store.add(format!("{p}.bn.running_var"), Mat::filled(1, d, 1.0), Group::Buffer),
                }
            })
            .collect();
        Self { cfg, node_type, rel_type, lambda, layers }
    }

    /// Trainable parameters (running statistics excluded).
    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.node_type.params();
        v.extend(self.rel_type.params());
        v.extend(self.lambda.params());
        for l in &self.layers {
            v.extend(l.message.params());
            v.extend(l.query.params());
            v.extend(l.key.params());
            v.extend(l.update.params());
            v.extend(l.norm.params());
        }
        v
    }

    /// Node type vectors (`nodes × dim`) and channel relation vectors (`channels × dim`).
    pub fn type_embeddings(&self, tape: &mut Tape, store: &ParamStore, input: &GraphInput) -> (Var, Var) {
        let t = tape.constant(input.type_features());
        let v = self.node_type.forward(tape, store, t);
        let r = tape.constant(input.relation_features(&self.cfg));
        let rv = self.rel_type.forward(tape, store, r);
        (v, rv)
    }

    /// Messages `f_msg([h_u; v_u; r_un])`, one row per channel.
    pub fn message(&self, tape: &mut Tape, store: &ParamStore, layer: usize, h_send: Var, v_send: Var, rel: Var) -> Var {
        let x = tape.concat_cols(&[h_send, v_send, rel]);
        self.layers[layer].message.forward(tape, store, x)
    }

    /// Attention weights per channel, normalized over each receiver's channels.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        input: &GraphInput,
        h: Var,
        v: Var,
        lam: Var,
        rel: Var,
    ) -> Var {
        let lyr = &self.layers[layer];
        let qin = tape.concat_cols(&[h, v, lam]);
        let q = lyr.query.forward(tape, store, qin);
        let q_send = tape.gather_rows(q, &input.senders);
        let h_recv = tape.gather_rows(h, &input.receivers);
        let v_recv = tape.gather_rows(v, &input.receivers);
        let l_recv = tape.gather_rows(lam, &input.receivers);
        let kin = tape.concat_cols(&[h_recv, v_recv, l_recv, rel]);
        let k = lyr.key.forward(tape, store, kin);
        let s = tape.row_dot(q_send, k);
        let s = tape.scale(s, 1.0 / (self.cfg.dim as f64).sqrt());
        tape.segment_softmax(s, &input.receivers)
    }

    /// One residual layer; returns the new states and any batch statistics used.
    #[allow(clippy::too_many_arguments)]
    pub fn layer_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        input: &GraphInput,
        h: Var,
        v: Var,
        lam: Var,
        rel: Var,
        opts: GnnOptions,
    ) -> (Var, Mat, Option<BatchStats>) {
        let n = input.node_count();
        let lyr = &self.layers[layer];
        let h_send = tape.gather_rows(h, &input.senders);
        let v_send = tape.gather_rows(v, &input.senders);
        let m = self.message(tape, store, layer, h_send, v_send, rel);
        let alpha = if opts.uniform_attention {
            let mut deg = vec![0usize; n];
            for &r in &input.receivers {
                deg[r] += 1;
            }
            tape.constant(Mat::col_vector(input.receivers.iter().map(|&r| 1.0 / deg[r] as f64).collect()))
        } else {
            self.attention(tape, store, layer, input, h, v, lam, rel)
        };
        let weighted = tape.mul_col(m, alpha);
        let agg = tape.scatter_add_rows(weighted, &input.receivers, n);
        let u = lyr.update.forward(tape, store, agg);
        let (normed, stats) = if opts.train {
            if n > 1 {
                let (x, s) = tape.batch_norm(u, self.cfg.bn_eps);
                (x, Some(s))
            } else {
                (u, None)
            }
        } else {
            let neg_mean = tape.constant(store.get(lyr.running_mean).scale(-1.0));
            let inv = store.get(lyr.running_var).map(|v| 1.0 / (v + self.cfg.bn_eps).sqrt());
            let inv = tape.constant(inv);
            let c = tape.add_row(u, neg_mean);
            (tape.mul_row(c, inv), None)
        };
        let f = lyr.norm.forward(tape, store, normed);
        let out = tape.add(f, h);
        (out, tape.value(alpha).clone(), stats)
    }

    /// Runs every layer from `h0` (`nodes × dim`) with relevance `lambda`
    /// (`nodes × 1`) and mean-pools the final states per graph.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &GraphInput,
        h0: Var,
        lambda: Var,
        opts: GnnOptions,
    ) -> Result<GraphEncoding> {
        let n = input.node_count();
        if n == 0 {
            return Err(GsapError::EmptyGraph);
        }
        let (hr, hc) = tape.shape(h0);
        if hc != self.cfg.dim {
            return Err(GsapError::DimMismatch { what: "initial node states", expected: self.cfg.dim, found: hc });
        }
        if hr != n {
            return Err(GsapError::DimMismatch { what: "initial node count", expected: n, found: hr });
        }
        let (v, rel) = self.type_embeddings(tape, store, input);
        let lam = self.lambda.forward(tape, store, lambda);
        let mut h = h0;
        let mut attention = Vec::with_capacity(self.layers.len());
        let mut batch_stats = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let (next, alpha, stats) = self.layer_forward(tape, store, l, input, h, v, lam, rel, opts);
            h = next;
            attention.push(alpha);
            batch_stats.push(stats);
        }
        let pooled = pool(tape, input, h);
        Ok(GraphEncoding { pooled, states: h, attention, batch_stats })
    }

    /// Exponential moving update of the running statistics.
    pub fn update_running(&self, store: &mut ParamStore, stats: &[Option<BatchStats>]) {
        let mo = self.cfg.bn_momentum;
        for (lyr, s) in self.layers.iter().zip(stats) {
            let Some(s) = s else { continue };
            let mean = store.get(lyr.running_mean).zip_map(&Mat::row_vector(s.mean.clone()), |r, b| (1.0 - mo) * r + mo * b);
            let var = store.get(lyr.running_var).zip_map(&Mat::row_vector(s.var.clone()), |r, b| (1.0 - mo) * r + mo * b);
            store.set(lyr.running_mean, mean);
            store.set(lyr.running_var, var);
        }
    }
}

/// Per-graph mean of node rows, `components × cols`.
pub fn pool(tape: &mut Tape, input: &GraphInput, h: Var) -> Var {
    let mut counts = vec![0usize; input.components];
    for &c in &input.component {
        counts[c] += 1;
    }
    let sums = tape.scatter_add_rows(h, &input.component, input.components);
    let inv = tape.constant(Mat::col_vector(counts.iter().map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 }).collect()));
    tape.mul_col(sums, inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EvidenceEdge, EvidenceNode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vec<String> {
        vec!["DefTop".into(), "RelatedQA".into(), "IsA".into()]
    }

    fn graph(n: usize, edges: &[(usize, usize, &str)]) -> EvidenceGraph {
        let types = [NodeType::Question, NodeType::Choice, NodeType::Other, NodeType::Paraphrase];
        EvidenceGraph {
            question: "q".into(),
            nodes: (0..n)
                .map(|i| EvidenceNode { id: i, surface: format!("n{i}"), node_type: types[i % 4], relevance: 0.5 })
                .collect(),
            edges: edges.iter().map(|&(h, t, r)| EvidenceEdge { head: h, tail: t, relation: r.into() }).collect(),
        }
    }

    fn setup(layers: usize) -> (ParamStore, GraphEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = GraphEncoder::new(&mut store, "gnn", GnnConfig::new(4, layers, 3), &mut rng);
        (store, enc)
    }

    fn run(store: &ParamStore, enc: &GraphEncoder, g: &EvidenceGraph, h0: &Mat, opts: GnnOptions) -> (Mat, Mat, Vec<Mat>) {
        let input = GraphInput::from_graph(g, &vocab()).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(h0.clone());
        let lam = tape.constant(Mat::col_vector(g.relevances()));
        let out = enc.encode(&mut tape, store, &input, h, lam, opts).unwrap();
        (tape.value(out.pooled).clone(), tape.value(out.states).clone(), out.attention)
    }

    #[test]
    fn isolated_node_attends_to_itself() {
        let (store, enc) = setup(2);
        let g = graph(3, &[(0, 1, "IsA")]);
        let (_, _, att) = run(&store, &enc, &g, &Mat::randn(3, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(1)), GnnOptions::default());
        let input = GraphInput::from_graph(&g, &vocab()).unwrap();
        let self2 = (0..input.channel_count()).find(|&c| input.receivers[c] == 2).unwrap();
        assert_eq!(att[0].get(self2, 0), 1.0);
    }

    #[test]
    fn zero_update_is_identity() {
        let (mut store, enc) = setup(3);
        for l in &enc.layers {
            store.set(l.update.w, Mat::zeros(4, 4));
            store.set(l.update.b.unwrap(), Mat::zeros(1, 4));
        }
        let g = graph(4, &[(0, 1, "IsA"), (1, 2, "RelatedQA"), (2, 3, "DefTop")]);
        let h0 = Mat::randn(4, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let (pooled, states, _) = run(&store, &enc, &g, &h0, GnnOptions::default());
        assert_eq!(states, h0);
        assert!(pooled.max_abs_diff(&h0.mean_rows()) < 1e-15);
    }

    #[test]
    fn zero_layers_pool_initial_states() {
        let (store, enc) = setup(0);
        let g = graph(3, &[(0, 2, "IsA")]);
        let h0 = Mat::randn(3, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let (pooled, _, _) = run(&store, &enc, &g, &h0, GnnOptions::default());
        assert!(pooled.max_abs_diff(&h0.mean_rows()) < 1e-15);
    }

    #[test]
    fn unknown_relation_rejected() {
        let g = graph(2, &[(0, 1, "Nope")]);
        assert!(matches!(GraphInput::from_graph(&g, &vocab()), Err(GsapError::UnknownRelation(_))));
    }

    #[test]
    fn empty_graph_rejected() {
        let (store, enc) = setup(1);
        let g = graph(0, &[]);
        let input = GraphInput::from_graph(&g, &vocab()).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Mat::zeros(0, 4));
        let lam = tape.constant(Mat::zeros(0, 1));
        assert!(matches!(enc.encode(&mut tape, &store, &input, h, lam, GnnOptions::default()), Err(GsapError::EmptyGraph)));
    }

    #[test]
    fn relation_vectors_are_direction_sensitive() {
        let (store, enc) = setup(1);
        let g = graph(2, &[(0, 1, "IsA")]);
        let input = GraphInput::from_graph(&g, &vocab()).unwrap();
        let mut tape = Tape::new();
        let (_, rel) = enc.type_embeddings(&mut tape, &store, &input);
        let r = tape.value(rel);
        assert!(r.row(0).iter().zip(r.row(1)).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn single_node_train_mode_skips_normalization() {
        let (store, enc) = setup(1);
        let g = graph(1, &[]);
        let h0 = Mat::randn(1, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let (_, states, _) = run(&store, &enc, &g, &h0, GnnOptions { train: true, uniform_attention: false });
        assert!(states.is_finite());
    }

    #[test]
    fn joint_encoding_pools_per_graph() {
        let (store, enc) = setup(2);
        let a = graph(3, &[(0, 1, "IsA"), (1, 2, "IsA")]);
        let b = graph(2, &[(0, 1, "RelatedQA")]);
        let input = GraphInput::from_graphs(&[&a, &b], &vocab()).unwrap();
        let h0 = Mat::randn(5, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let mut tape = Tape::new();
        let h = tape.constant(h0.clone());
        let lam = tape.constant(Mat::filled(5, 1, 0.5));
        let out = enc.encode(&mut tape, &store, &input, h, lam, GnnOptions::default()).unwrap();
        let (pa, _, _) = run(&store, &enc, &a, &h0.slice_rows(0, 3), GnnOptions::default());
        let (pb, _, _) = run(&store, &enc, &b, &h0.slice_rows(3, 2), GnnOptions::default());
        let joint = tape.value(out.pooled);
        assert!(joint.slice_rows(0, 1).max_abs_diff(&pa) < 1e-12);
        assert!(joint.slice_rows(1, 1).max_abs_diff(&pb) < 1e-12);
    }
}
