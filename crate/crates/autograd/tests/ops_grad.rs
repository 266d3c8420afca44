//! Every tape op checked against central finite differences.

use gsap_autograd::{relative_error, Mat, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-6;

/// Builds `sum(op(inputs) ⊙ weights)` and compares its gradient w.r.t. each
/// input with finite differences.
fn check(inputs: Vec<Mat>, op: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |mats: &[Mat], weights: Option<&Mat>| -> (f64, Option<Mat>, Vec<Option<Mat>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = mats.iter().map(|m| tape.input(m.clone())).collect();
        let out = op(&mut tape, &vars);
        let (r, c) = tape.shape(out);
        let w = match weights {
            Some(w) => w.clone(),
            None => return (0.0, Some(Mat::zeros(r, c)), vec![]),
        };
        let wv = tape.constant(w);
        let prod = tape.mul(out, wv);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);
        let g = vars.iter().map(|&v| grads.wrt(v).cloned()).collect();
        (tape.scalar(loss), None, g)
    };
    let (_, shape, _) = eval(&inputs, None);
    let shape = shape.unwrap();
    let weights = Mat::randn(shape.rows(), shape.cols(), 1.0, &mut rng);
    let (_, _, analytic) = eval(&inputs, Some(&weights));
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let mut up = inputs.clone();
            up[k].data_mut()[i] += EPS;
            let mut down = inputs.clone();
            down[k].data_mut()[i] -= EPS;
            let numeric = (eval(&up, Some(&weights)).0 - eval(&down, Some(&weights)).0) / (2.0 * EPS);
            let a = analytic[k].as_ref().map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            assert!(err < TOL, "input {k} entry {i}: analytic {a} numeric {numeric} rel {err}");
        }
    }
}

fn rand(rows: usize, cols: usize, seed: u64) -> Mat {
    Mat::randn(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn matmul_family() {
    check(vec![rand(3, 4, 1), rand(4, 2, 2)], |t, v| t.matmul(v[0], v[1]));
    check(vec![rand(3, 4, 1), rand(5, 4, 2)], |t, v| t.matmul_t(v[0], v[1]));
    check(vec![rand(3, 4, 1)], |t, v| t.transpose(v[0]));
}

#[test]
fn elementwise_and_broadcast() {
    check(vec![rand(3, 4, 1), rand(3, 4, 2)], |t, v| t.add(v[0], v[1]));
    check(vec![rand(3, 4, 1), rand(3, 4, 2)], |t, v| t.sub(v[0], v[1]));
    check(vec![rand(3, 4, 1), rand(3, 4, 2)], |t, v| t.mul(v[0], v[1]));
    check(vec![rand(3, 4, 1), rand(1, 4, 2)], |t, v| t.add_row(v[0], v[1]));
    check(vec![rand(3, 4, 1), rand(1, 4, 2)], |t, v| t.mul_row(v[0], v[1]));
    check(vec![rand(3, 4, 1), rand(3, 1, 2)], |t, v| t.mul_col(v[0], v[1]));
    check(vec![rand(3, 4, 1)], |t, v| t.affine(v[0], -1.5, 2.0));
}

#[test]
fn activations() {
    // keep relu inputs away from the kink
    let x = rand(4, 5, 3).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    check(vec![x], |t, v| t.relu(v[0]));
    check(vec![rand(4, 5, 3)], |t, v| t.sigmoid(v[0]));
    check(vec![rand(4, 5, 3)], |t, v| t.tanh(v[0]));
    check(vec![rand(4, 5, 3)], |t, v| t.gelu(v[0]));
}

#[test]
fn softmaxes() {
    check(vec![rand(3, 5, 4)], |t, v| t.softmax_rows(v[0]));
    let seg = [0, 1, 0, 2, 1, 1, 2];
    check(vec![rand(7, 1, 5)], move |t, v| t.segment_softmax(v[0], &seg));
}

#[test]
fn indexing() {
    check(vec![rand(4, 3, 6)], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]));
    check(vec![rand(5, 3, 6)], |t, v| t.scatter_add_rows(v[0], &[1, 0, 1, 3, 1], 4));
    check(vec![rand(2, 3, 7), rand(2, 2, 8)], |t, v| t.concat_cols(&[v[0], v[1], v[0]]));
    check(vec![rand(2, 3, 7), rand(1, 3, 8)], |t, v| t.concat_rows(&[v[0], v[1]]));
    check(vec![rand(3, 6, 9)], |t, v| t.slice_cols(v[0], 2, 3));
    check(vec![rand(5, 2, 9)], |t, v| t.slice_rows(v[0], 1, 3));
}

#[test]
fn reductions() {
    check(vec![rand(4, 3, 10)], |t, v| t.sum_rows(v[0]));
    check(vec![rand(4, 3, 10)], |t, v| t.mean_rows(v[0]));
    check(vec![rand(4, 3, 10)], |t, v| t.sum_all(v[0]));
    check(vec![rand(4, 3, 10), rand(4, 3, 11)], |t, v| t.row_dot(v[0], v[1]));
}

#[test]
fn normalizations() {
    check(vec![rand(5, 3, 12)], |t, v| t.batch_norm(v[0], 1e-5).0);
    check(vec![rand(3, 6, 13)], |t, v| t.layer_norm(v[0], 1e-5));
    check(vec![rand(3, 4, 14)], |t, v| t.l2_normalize_rows(v[0]));
}

#[test]
fn cross_entropy_gradient() {
    check(vec![rand(1, 5, 15)], |t, v| t.cross_entropy(v[0], 3));
}

#[test]
fn shared_input_accumulates() {
    // y = x ⊙ x + x  ⇒ dy/dx = 2x + 1
    let x = rand(2, 2, 16);
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let sq = tape.mul(v, v);
    let y = tape.add(sq, v);
    let loss = tape.sum_all(y);
    let g = tape.backward(loss);
    let expected = x.map(|a| 2.0 * a + 1.0);
    assert!(g.wrt(v).unwrap().max_abs_diff(&expected) < 1e-12);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(rand(2, 2, 17));
    let x = tape.input(rand(2, 2, 18));
    let y = tape.mul(c, x);
    let loss = tape.sum_all(y);
    let g = tape.backward(loss);
    assert!(g.wrt(c).is_none());
    assert!(g.wrt(x).is_some());
}

#[test]
fn l2_normalize_zero_row_stays_zero() {
    let mut tape = Tape::new();
    let x = tape.input(Mat::zeros(1, 3));
    let y = tape.l2_normalize_rows(x);
    assert_eq!(tape.value(y), &Mat::zeros(1, 3));
    let loss = tape.sum_all(y);
    let g = tape.backward(loss);
    assert_eq!(g.wrt(x).unwrap(), &Mat::zeros(1, 3));
}
