//! Define-by-run reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep visits
//! every consumer before its inputs. Nodes that cannot reach a trainable
//! leaf carry `needs_grad = false` and are skipped during the sweep.

use std::collections::{BTreeMap, HashMap};

use crate::mat::{gelu, gelu_grad, sigmoid, Mat};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    /// Rows of a parameter table, gathered without copying the whole table.
    EmbedRows { param: ParamId, rows: usize, idx: Vec<usize> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    SegmentSoftmax { x: Var, seg: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterAddRows { x: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    SumRows(Var),
    SumAll(Var),
    RowDot(Var, Var),
    /// Column standardization over rows; keeps `1/sqrt(var+eps)` per column.
    NormalizeCols { x: Var, inv_std: Vec<f64> },
    /// Row standardization over columns; keeps `1/sqrt(var+eps)` per row.
    NormalizeRows { x: Var, inv_std: Vec<f64> },
    /// Row-wise L2 normalization; keeps each input row norm.
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Column statistics produced by [`Tape::batch_norm`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: BTreeMap<ParamId, Mat>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Mat> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Mat> {
        self.params
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on {:?}", m.shape());
        m.get(0, 0)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (used by tests and gradient checks).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf. Repeated requests for the same id return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    /// Gathers rows `idx` of a parameter table.
    pub fn embed(&mut self, store: &ParamStore, id: ParamId, idx: &[usize]) -> Var {
        let table = store.get(id);
        let value = table.gather_rows(idx);
        let op = Op::EmbedRows { param: id, rows: table.rows(), idx: idx.to_vec() };
        self.push(value, op, store.is_trainable(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).hadamard(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Broadcast-add a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a).add_row(self.value(row));
        let ng = self.ng(&[a, row]);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// Broadcast-multiply every row of `a` by a `1 × cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a).mul_row(self.value(row));
        let ng = self.ng(&[a, row]);
        self.push(v, Op::MulRow(a, row), ng)
    }

    /// Scale row `i` of `a` by `col[i]` (`col` is `rows × 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a).mul_col(self.value(col));
        let ng = self.ng(&[a, col]);
        self.push(v, Op::MulCol(a, col), ng)
    }

    /// `a * mul + add`, elementwise.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let v = self.value(a).map(|x| x * mul + add);
        let ng = self.ng(&[a]);
        self.push(v, Op::Affine(a, mul), ng)
    }

    /// `a * s`; values equal [`Mat::scale`].
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(&[a]);
        self.push(v, Op::Affine(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let ng = self.ng(&[a]);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        let ng = self.ng(&[a]);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    /// Softmax of the column `x` (`n × 1`) within groups: entries sharing
    /// `seg[i]` are normalized together.
    pub fn segment_softmax(&mut self, x: Var, seg: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols(), 1, "segment_softmax expects a column");
        assert_eq!(xv.rows(), seg.len(), "segment_softmax: one segment id per entry");
        let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; n_seg];
        for (i, &s) in seg.iter().enumerate() {
            max[s] = max[s].max(xv.get(i, 0));
        }
        let mut out: Vec<f64> = seg.iter().enumerate().map(|(i, &s)| (xv.get(i, 0) - max[s]).exp()).collect();
        let mut total = vec![0.0; n_seg];
        for (i, &s) in seg.iter().enumerate() {
            total[s] += out[i];
        }
        for (i, &s) in seg.iter().enumerate() {
            out[i] /= total[s];
        }
        let ng = self.ng(&[x]);
        self.push(Mat::col_vector(out), Op::SegmentSoftmax { x, seg: seg.to_vec() }, ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x).gather_rows(idx);
        let ng = self.ng(&[x]);
        self.push(v, Op::GatherRows { x, idx: idx.to_vec() }, ng)
    }

    /// Output row `idx[i]` accumulates input row `i`; output has `n` rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), idx.len(), "scatter_add_rows: one target per row");
        let mut out = Mat::zeros(n, xv.cols());
        for (i, &t) in idx.iter().enumerate() {
            for (o, v) in out.row_mut(t).iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::ScatterAddRows { x, idx: idx.to_vec() }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::concat_cols(&mats);
        let ng = self.ng(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::concat_rows(&mats);
        let ng = self.ng(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_cols(start, len);
        let ng = self.ng(&[x]);
        self.push(v, Op::SliceCols { x, start }, ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_rows(start, len);
        let ng = self.ng(&[x]);
        self.push(v, Op::SliceRows { x, start }, ng)
    }

    /// Column sums, `1 × cols`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).sum_rows();
        let ng = self.ng(&[x]);
        self.push(v, Op::SumRows(x), ng)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let n = self.value(x).rows();
        assert!(n > 0, "mean_rows of empty matrix");
        let s = self.sum_rows(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Mat::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(v, Op::SumAll(x), ng)
    }

    /// Row-wise dot products, `rows × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "row_dot shape mismatch");
        let v = Mat::col_vector((0..av.rows()).map(|i| crate::mat::dot(av.row(i), bv.row(i))).collect());
        let ng = self.ng(&[a, b]);
        self.push(v, Op::RowDot(a, b), ng)
    }

    /// Standardizes each column over the rows (batch normalization without
    /// the affine part) and reports the batch statistics.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        assert!(n > 0, "batch_norm of empty batch");
        let mean = xv.mean_rows().into_data();
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (j, v) in xv.row(i).iter().enumerate() {
                var[j] += (v - mean[j]) * (v - mean[j]);
            }
        }
        for v in var.iter_mut() {
            *v /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = xv.clone();
        for i in 0..n {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (*o - mean[j]) * inv_std[j];
            }
        }
        let ng = self.ng(&[x]);
        let v = self.push(out, Op::NormalizeCols { x, inv_std }, ng);
        (v, BatchStats { mean, var })
    }

    /// Standardizes each row over its columns (layer normalization without
    /// the affine part). Values equal [`Mat::layer_norm_rows`] exactly.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let out = xv.layer_norm_rows(eps);
        let d = xv.cols() as f64;
        let inv_std = (0..xv.rows())
            .map(|i| {
                let row = xv.row(i);
                let mean = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                1.0 / (var + eps).sqrt()
            })
            .collect();
        let ng = self.ng(&[x]);
        self.push(out, Op::NormalizeRows { x, inv_std }, ng)
    }

    /// Divides each row by its L2 norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let n = xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if n > 0.0 {
                for o in out.row_mut(i) {
                    *o /= n;
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::L2NormalizeRows { x, norms }, ng)
    }

    /// `-log softmax(logits)[target]` for a `1 × b` row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), 1, "cross_entropy expects a row of logits");
        assert!(target < lv.cols(), "target {target} out of range");
        let row = lv.row(0);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let probs: Vec<f64> = row.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - row[target];
        let ng = self.ng(&[logits]);
        self.push(Mat::scalar(loss), Op::CrossEntropy { logits, target, probs }, ng)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: BTreeMap<ParamId, Mat> = BTreeMap::new();
        grads[loss.0] = Some(Mat::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    accumulate_param(&mut params, *id, g.clone());
                    grads[i] = Some(g);
                }
                Op::EmbedRows { param, rows, idx } => {
                    let mut full = Mat::zeros(*rows, g.cols());
                    for (r, &t) in idx.iter().enumerate() {
                        for (o, v) in full.row_mut(t).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate_param(&mut params, *param, full);
                }
                Op::MatMul(a, b) => {
                    if self.needs_grad(*a) {
                        let ga = g.matmul_t(self.value(*b));
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs_grad(*b) {
                        let gb = self.value(*a).t_matmul(&g);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    if self.needs_grad(*a) {
                        let ga = g.matmul(self.value(*b));
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs_grad(*b) {
                        let gb = g.t_matmul(self.value(*a));
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(a) => self.acc(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    self.acc(&mut grads, *b, g.clone());
                    self.acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *b, g.scale(-1.0));
                    self.acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.hadamard(self.value(*b));
                    let gb = g.hadamard(self.value(*a));
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, r) => {
                    if self.needs_grad(*r) {
                        self.acc(&mut grads, *r, g.sum_rows());
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    if self.needs_grad(*r) {
                        let gr = g.hadamard(self.value(*a)).sum_rows();
                        self.acc(&mut grads, *r, gr);
                    }
                    if self.needs_grad(*a) {
                        let ga = g.mul_row(self.value(*r));
                        self.acc(&mut grads, *a, ga);
                    }
                }
                Op::MulCol(a, c) => {
                    if self.needs_grad(*c) {
                        let gc = g.hadamard(self.value(*a)).sum_cols();
                        self.acc(&mut grads, *c, gc);
                    }
                    if self.needs_grad(*a) {
                        let ga = g.mul_col(self.value(*c));
                        self.acc(&mut grads, *a, ga);
                    }
                }
                Op::Affine(a, mul) => self.acc(&mut grads, *a, g.scale(*mul)),
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    self.acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |g, y| g * y * (1.0 - y));
                    self.acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |g, y| g * (1.0 - y * y));
                    self.acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let ga = g.zip_map(self.value(*a), |g, x| g * gelu_grad(x));
                    self.acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let s = crate::mat::dot(yr, gr);
                        for (o, (yv, gv)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - s);
                        }
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::SegmentSoftmax { x, seg } => {
                    let y = &node.value;
                    let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
                    let mut s = vec![0.0; n_seg];
                    for (i, &sg) in seg.iter().enumerate() {
                        s[sg] += y.get(i, 0) * g.get(i, 0);
                    }
                    let gx = Mat::col_vector(
                        seg.iter().enumerate().map(|(i, &sg)| y.get(i, 0) * (g.get(i, 0) - s[sg])).collect(),
                    );
                    self.acc(&mut grads, *x, gx);
                }
                Op::GatherRows { x, idx } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Mat::zeros(rows, cols);
                    for (r, &t) in idx.iter().enumerate() {
                        for (o, v) in gx.row_mut(t).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::ScatterAddRows { x, idx } => {
                    self.acc(&mut grads, *x, g.gather_rows(idx));
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.needs_grad(p) {
                            self.acc(&mut grads, p, g.slice_cols(start, w));
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        if self.needs_grad(p) {
                            self.acc(&mut grads, p, g.slice_rows(start, h));
                        }
                        start += h;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::SliceRows { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Mat::zeros(rows, cols);
                    for r in 0..g.rows() {
                        gx.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::SumRows(x) => {
                    let rows = self.shape(*x).0;
                    let gx = Mat::from_rows(&vec![g.row(0).to_vec(); rows]);
                    self.acc(&mut grads, *x, gx);
                }
                Op::SumAll(x) => {
                    let (rows, cols) = self.shape(*x);
                    self.acc(&mut grads, *x, Mat::filled(rows, cols, g.get(0, 0)));
                }
                Op::RowDot(a, b) => {
                    if self.needs_grad(*a) {
                        let ga = self.value(*b).mul_col(&g);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs_grad(*b) {
                        let gb = self.value(*a).mul_col(&g);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::NormalizeCols { x, inv_std } => {
                    // dx = inv_std/n * (n*g - sum(g) - y*sum(g*y)), per column
                    let y = &node.value;
                    let n = y.rows() as f64;
                    let sum_g = g.sum_rows();
                    let sum_gy = g.hadamard(y).sum_rows();
                    let mut gx = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        for c in 0..y.cols() {
                            let v = inv_std[c] / n
                                * (n * g.get(r, c) - sum_g.get(0, c) - y.get(r, c) * sum_gy.get(0, c));
                            gx.set(r, c, v);
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::NormalizeRows { x, inv_std } => {
                    let y = &node.value;
                    let d = y.cols() as f64;
                    let mut gx = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let sg: f64 = gr.iter().sum();
                        let sgy = crate::mat::dot(gr, yr);
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] / d * (d * gr[c] - sg - yr[c] * sgy);
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        if norms[r] == 0.0 {
                            continue;
                        }
                        let (yr, gr) = (y.row(r), g.row(r));
                        let s = crate::mat::dot(gr, yr);
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = (gr[c] - yr[c] * s) / norms[r];
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy { logits, target, probs } => {
                    let s = g.get(0, 0);
                    let mut gl = Mat::row_vector(probs.iter().map(|p| p * s).collect());
                    let t = gl.get(0, *target);
                    gl.set(0, *target, t - s);
                    self.acc(&mut grads, *logits, gl);
                }
            }
        }
        Gradients { nodes: grads, params }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn accumulate_param(params: &mut BTreeMap<ParamId, Mat>, id: ParamId, g: Mat) {
    match params.get_mut(&id) {
        Some(existing) => existing.add_assign(&g),
        None => {
            params.insert(id, g);
        }
    }
}
