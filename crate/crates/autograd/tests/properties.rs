use gsap_autograd::{Group, Mat, ParamStore, Tape};
use proptest::prelude::*;

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Mat::from_vec(rows, cols, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(m in (1usize..5, 1usize..6).prop_flat_map(|(r, c)| mat(r, c))) {
        let s = m.softmax_rows();
        for r in 0..s.rows() {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn segment_softmax_sums_per_segment(vals in prop::collection::vec(-30.0f64..30.0, 1..20), nseg in 1usize..5) {
        let seg: Vec<usize> = (0..vals.len()).map(|i| (i * 7 + 3) % nseg).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Mat::col_vector(vals.clone()));
        let y = tape.segment_softmax(x, &seg);
        let mut sums = vec![0.0; nseg];
        for (i, &s) in seg.iter().enumerate() {
            sums[s] += tape.value(y).get(i, 0);
        }
        for (s, total) in sums.iter().enumerate() {
            if seg.contains(&s) {
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_variants_agree(a in mat(3, 4), b in mat(4, 2), c in mat(2, 4)) {
        prop_assert!(a.matmul(&b).max_abs_diff(&a.matmul_t(&b.transpose())) < 1e-12);
        prop_assert!(a.transpose().t_matmul(&c.transpose()).max_abs_diff(&a.matmul(&c.transpose())) < 1e-12);
    }

    #[test]
    fn manifest_round_trip(a in mat(2, 3), b in mat(1, 4)) {
        let mut store = ParamStore::new();
        store.add("a", a.clone(), Group::Graph);
        store.add("b", b.clone(), Group::Frozen);
        let manifest = store.to_manifest();
        let mut other = ParamStore::new();
        let ia = other.add("a", Mat::zeros(2, 3), Group::Graph);
        let ib = other.add("b", Mat::zeros(1, 4), Group::Frozen);
        other.load_manifest(&manifest).unwrap();
        prop_assert_eq!(other.get(ia), &a);
        prop_assert_eq!(other.get(ib), &b);
    }
}
