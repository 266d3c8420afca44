//! Affine layers shared by every module.

use gsap_autograd::{Group, Mat, ParamId, ParamStore, Tape, Var};
use rand::Rng;

/// `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: Group,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Mat::uniform(in_dim, out_dim, bound, rng), group);
        let b = bias.then(|| store.add(format!("{name}.b"), Mat::zeros(1, out_dim), group));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        assert_eq!(tape.shape(x).1, self.in_dim, "linear input width ({}) vs {}", tape.shape(x).1, store.name(self.w));
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    /// Same arithmetic as [`Linear::forward`] without a tape.
    pub fn eval(&self, store: &ParamStore, x: &Mat) -> Mat {
        let y = x.matmul(store.get(self.w));
        match self.b {
            Some(b) => y.add_row(store.get(b)),
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.w];
        v.extend(self.b);
        v
    }
}

/// Learned per-feature scale and shift after a normalization.
#[derive(Clone, Debug)]
pub struct Affine {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: Group) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Mat::filled(1, dim, 1.0), group);
        let beta = store.add(format!("{name}.beta"), Mat::zeros(1, dim), group);
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = tape.mul_row(x, g);
        tape.add_row(y, b)
    }

    pub fn eval(&self, store: &ParamStore, x: &Mat) -> Mat {
        x.mul_row(store.get(self.gamma)).add_row(store.get(self.beta))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}
