//! Reasoning head: graph refresh from prompt outputs, BiGRU fusion of text
//! and graph summaries, knowledge gates and per-choice scoring.
//!
//! Every op works on `b` rows at once, one row per answer choice.

use std::collections::BTreeMap;

use gsap_autograd::{Group, Mat, ParamId, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Linear;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmprConfig {
    pub hidden: usize,
    pub graph_dim: usize,
    /// Width of each of the four context groups.
    pub fuse: usize,
    pub gru_hidden: usize,
}

#[derive(Clone, Debug)]
pub struct GruCell {
    pub wz: Linear,
    pub wr: Linear,
    pub wn: Linear,
    pub uz: Linear,
    pub ur: Linear,
    pub un: Linear,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let g = Group::Graph;
        Self {
            wz: Linear::new(store, &format!("{name}.wz"), input, hidden, true, g, rng),
            wr: Linear::new(store, &format!("{name}.wr"), input, hidden, true, g, rng),
            wn: Linear::new(store, &format!("{name}.wn"), input, hidden, true, g, rng),
            uz: Linear::new(store, &format!("{name}.uz"), hidden, hidden, false, g, rng),
            ur: Linear::new(store, &format!("{name}.ur"), hidden, hidden, false, g, rng),
            un: Linear::new(store, &format!("{name}.un"), hidden, hidden, false, g, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.wz, &self.wr, &self.wn, &self.uz, &self.ur, &self.un].iter().flat_map(|l| l.params()).collect()
    }

    /// `z = σ(xW_z + hU_z)`, `r = σ(xW_r + hU_r)`, `n = tanh(xW_n + (r⊙h)U_n)`,
    /// `h' = (1 − z)⊙n + z⊙h`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Var {
        let gate = |tape: &mut Tape, w: &Linear, u: &Linear, hin: Var| {
            let a = w.forward(tape, store, x);
            let b = u.forward(tape, store, hin);
            tape.add(a, b)
        };
        let z = gate(tape, &self.wz, &self.uz, h);
        let z = tape.sigmoid(z);
        let r = gate(tape, &self.wr, &self.ur, h);
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h);
        let n = gate(tape, &self.wn, &self.un, rh);
        let n = tape.tanh(n);
        let one_minus_z = tape.affine(z, -1.0, 1.0);
        let a = tape.mul(one_minus_z, n);
        let b = tape.mul(z, h);
        tape.add(a, b)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HmprFlags {
    /// Concatenate the projected steps instead of running the BiGRU.
    pub no_bigru: bool,
    /// Fix every knowledge gate at 0.5.
    pub no_knowledge_attention: bool,
}

#[derive(Clone, Debug)]
pub struct Hmpr {
    pub cfg: HmprConfig,
    pub refresh: Linear,
    pub text_proj: Linear,
    pub graph_proj: Linear,
    pub forward_gru: GruCell,
    pub backward_gru: GruCell,
    pub context: Linear,
    pub w_h: Linear,
}

/// Fused quantities of one scoring pass, `b` rows each.
#[derive(Debug)]
pub struct Fusion {
    /// `[T_a, T_c, T_k, T_g]`
    pub groups: [Var; 4],
    /// `[α_ka, α_kc, α_ga, α_gc]`, each `b × 1`.
    pub gates: [Var; 4],
    pub t_star: Var,
    /// Pre-ReLU scores, `b × 1`.
    pub logits: Var,
}

impl Hmpr {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: HmprConfig, rng: &mut R) -> Self {
        let g = Group::Graph;
        let (h, d, f, gh) = (cfg.hidden, cfg.graph_dim, cfg.fuse, cfg.gru_hidden);
        let step_in = f + h + d;
        Self {
            refresh: Linear::new(store, "hmpr.refresh", h, d, true, g, rng),
            text_proj: Linear::new(store, "hmpr.text_proj", h, f, true, g, rng),
            graph_proj: Linear::new(store, "hmpr.graph_proj", d, f, true, g, rng),
            forward_gru: GruCell::new(store, "hmpr.gru_fw", step_in, gh, rng),
            backward_gru: GruCell::new(store, "hmpr.gru_bw", step_in, gh, rng),
            context: Linear::new(store, "hmpr.context", 2 * gh, 4 * f, true, g, rng),
            w_h: Linear::new(store, "hmpr.w_h", 4 * f, 1, false, g, rng),
            cfg,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.refresh.params();
        v.extend(self.text_proj.params());
        v.extend(self.graph_proj.params());
        v.extend(self.forward_gru.params());
        v.extend(self.backward_gru.params());
        v.extend(self.context.params());
        v.extend(self.w_h.params());
        v
    }

    /// Replaces the initial state of every node named in `outputs` by the
    /// projected, L2-normalized mean of its prompt outputs (`1 × hidden`
    /// rows). Other rows of `h0` are kept.
    pub fn refresh_states(&self, tape: &mut Tape, store: &ParamStore, h0: Var, outputs: &[(usize, Var)]) -> Var {
        if outputs.is_empty() {
            return h0;
        }
        let mut by_node: BTreeMap<usize, Vec<Var>> = BTreeMap::new();
        for &(n, v) in outputs {
            by_node.entry(n).or_default().push(v);
        }
        let rows: Vec<Var> = by_node
            .values()
            .map(|vs| {
                let stacked = tape.concat_rows(vs);
                let m = tape.mean_rows(stacked);
                tape.l2_normalize_rows(m)
            })
            .collect();
        let stacked = tape.concat_rows(&rows);
        let fresh = self.refresh.forward(tape, store, stacked);
        let n = tape.shape(h0).0;
        let mut idx: Vec<usize> = (0..n).collect();
        for (j, &node) in by_node.keys().enumerate() {
            idx[node] = n + j;
        }
        let all = tape.concat_rows(&[h0, fresh]);
        tape.gather_rows(all, &idx)
    }

    /// Fusion and scoring. `segments` are the question, choice and evidence
    /// embeddings (`b × hidden` each), `g_prime` is `b × graph_dim`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, segments: [Var; 3], g_prime: Var, flags: HmprFlags) -> Fusion {
        let h_star = textual_summary(tape, segments);
        let groups = self.fuse(tape, store, segments, h_star, g_prime, flags);
        let (gates, t_star) = knowledge_attention(tape, groups, self.cfg.fuse, flags.no_knowledge_attention);
        let logits = self.w_h.forward(tape, store, t_star);
        Fusion { groups, gates, t_star, logits }
    }

    /// The four context groups `[T_a, T_c, T_k, T_g]`.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        segments: [Var; 3],
        h_star: Var,
        g_prime: Var,
        flags: HmprFlags,
    ) -> [Var; 4] {
        let mut proj: Vec<Var> = segments.iter().map(|&s| self.text_proj.forward(tape, store, s)).collect();
        proj.push(self.graph_proj.forward(tape, store, g_prime));
        let f = self.cfg.fuse;
        let context = if flags.no_bigru {
            tape.concat_cols(&proj)
        } else {
            let steps: Vec<Var> = proj.iter().map(|&p| tape.concat_cols(&[p, h_star, g_prime])).collect();
            let b = tape.shape(h_star).0;
            let zero = tape.constant(Mat::zeros(b, self.cfg.gru_hidden));
            let mut fw = zero;
            for &x in &steps {
                fw = self.forward_gru.step(tape, store, x, fw);
            }
            let mut bw = zero;
            for &x in steps.iter().rev() {
                bw = self.backward_gru.step(tape, store, x, bw);
            }
            let both = tape.concat_cols(&[fw, bw]);
            self.context.forward(tape, store, both)
        };
        [0, 1, 2, 3].map(|i| tape.slice_cols(context, i * f, f))
    }
}

/// Row-wise L2-normalized sum of the segment embeddings.
pub fn textual_summary(tape: &mut Tape, segments: [Var; 3]) -> Var {
    let s = tape.add(segments[0], segments[1]);
    let s = tape.add(s, segments[2]);
    tape.l2_normalize_rows(s)
}

/// Gates `σ(T_x·T_y/√d)` for the pairs (k,a), (k,c), (g,a), (g,c) and
/// `t* = [T_a; T_c; (α_ka+α_kc)T_k; (α_ga+α_gc)T_g]`.
pub fn knowledge_attention(tape: &mut Tape, groups: [Var; 4], dim: usize, fixed: bool) -> ([Var; 4], Var) {
    let [ta, tc, tk, tg] = groups;
    let b = tape.shape(ta).0;
    let scale = 1.0 / (dim as f64).sqrt();
    let gates = [(tk, ta), (tk, tc), (tg, ta), (tg, tc)].map(|(x, y)| {
        if fixed {
            tape.constant(Mat::filled(b, 1, 0.5))
        } else {
            let s = tape.row_dot(x, y);
            let s = tape.scale(s, scale);
            tape.sigmoid(s)
        }
    });
    let ak = tape.add(gates[0], gates[1]);
    let ag = tape.add(gates[2], gates[3]);
    let k = tape.mul_col(tk, ak);
    let g = tape.mul_col(tg, ag);
    let t_star = tape.concat_cols(&[ta, tc, k, g]);
    (gates, t_star)
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head() -> (ParamStore, Hmpr) {
        let mut store = ParamStore::new();
        let cfg = HmprConfig { hidden: 4, graph_dim: 3, fuse: 2, gru_hidden: 3 };
        let h = Hmpr::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(5));
        (store, h)
    }

    #[test]
    fn zero_gru_gives_context_bias() {
        let (mut store, h) = head();
        for id in h.forward_gru.params().into_iter().chain(h.backward_gru.params()).chain(h.context.params()) {
            let (r, c) = store.get(id).shape();
            store.set(id, Mat::zeros(r, c));
        }
        let bias = Mat::row_vector(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        store.set(h.context.b.unwrap(), bias.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let segs = [0, 1, 2].map(|_| tape.constant(Mat::randn(2, 4, 1.0, &mut rng)));
        let g = tape.constant(Mat::randn(2, 3, 1.0, &mut rng));
        let hs = textual_summary(&mut tape, segs);
        let groups = h.fuse(&mut tape, &store, segs, hs, g, HmprFlags::default());
        for (i, gv) in groups.iter().enumerate() {
            for r in 0..2 {
                assert_eq!(tape.value(*gv).row(r), &bias.data()[2 * i..2 * i + 2]);
            }
        }
    }

    #[test]
    fn summary_cancels() {
        let mut tape = Tape::new();
        let v = Mat::row_vector(vec![1.0, -2.0]);
        let a = tape.constant(v.clone());
        let b = tape.constant(v.scale(-1.0));
        let z = tape.constant(Mat::zeros(1, 2));
        let s = textual_summary(&mut tape, [a, b, z]);
        assert_eq!(tape.value(s), &Mat::zeros(1, 2));
        let s = textual_summary(&mut tape, [a, z, z]);
        assert!(tape.value(s).max_abs_diff(&v.scale(1.0 / 5f64.sqrt())) < 1e-15);
    }

    #[test]
    fn orthogonal_groups_give_half_gates() {
        let mut tape = Tape::new();
        let ta = tape.constant(Mat::row_vector(vec![1.0, 0.0]));
        let tc = tape.constant(Mat::row_vector(vec![0.0, 1.0]));
        let tk = tape.constant(Mat::row_vector(vec![0.0, 0.0]));
        let tg = tape.constant(Mat::row_vector(vec![0.0, 3.0]));
        let (gates, t) = knowledge_attention(&mut tape, [ta, tc, tk, tg], 2, false);
        assert_eq!(tape.value(gates[0]).get(0, 0), 0.5);
        assert_eq!(tape.value(gates[2]).get(0, 0), 0.5);
        assert!(tape.value(gates[3]).get(0, 0) > 0.5);
        assert_eq!(&tape.value(t).data()[4..6], &[0.0, 0.0]);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0, 1.0]), 1);
    }

    #[test]
    fn refresh_with_nothing_keeps_states() {
        let (store, h) = head();
        let mut tape = Tape::new();
        let h0 = tape.constant(Mat::randn(3, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        assert_eq!(h.refresh_states(&mut tape, &store, h0, &[]), h0);
    }

    #[test]
    fn refresh_averages_per_node() {
        let (store, h) = head();
        let mut tape = Tape::new();
        let h0 = tape.constant(Mat::zeros(3, 3));
        let v = tape.constant(Mat::row_vector(vec![3.0, 0.0, 4.0, 0.0]));
        let once = h.refresh_states(&mut tape, &store, h0, &[(1, v)]);
        let twice = h.refresh_states(&mut tape, &store, h0, &[(1, v), (1, v)]);
        assert_eq!(tape.value(once), tape.value(twice));
        let expected = h.refresh.eval(&store, &Mat::row_vector(vec![0.6, 0.0, 0.8, 0.0]));
        assert!(tape.value(once).slice_rows(1, 1).max_abs_diff(&expected) < 1e-15);
        assert_eq!(tape.value(once).row(0), &[0.0, 0.0, 0.0]);
    }
}
