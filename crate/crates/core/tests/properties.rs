use proptest::prelude::*;

use congruence_lab::analysis::{argmax_entropy, EntropyReport};
use congruence_lab::attention::{matmul, row_softmax, AttentionBundle, BlockPartition, Matrix};
use congruence_lab::congruence::{
    argmax_correspondence, cacr_total, change_of_basis_l, change_of_basis_v, hard_equivalence_l,
    hard_equivalence_v, relative_error, soft_equivalence_oracle_l, soft_equivalence_oracle_v,
    ORACLE_TOLERANCE,
};
use congruence_lab::divergence::mkl;
use congruence_lab::gradients::{cacr_gradients, cacr_l_gradients, cacr_v_gradients};
use congruence_lab::sampling::{permutation_fixed_point, case_rng};

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-range..=range, rows * cols)
        .prop_map(move |data| Matrix::new(rows, cols, data).unwrap())
}

fn partition(max_n: usize, range: f64) -> impl Strategy<Value = BlockPartition> {
    (1..=max_n, 1..=max_n).prop_flat_map(move |(nl, nv)| {
        (
            matrix(nl, nl, range),
            matrix(nl, nv, range),
            matrix(nv, nl, range),
            matrix(nv, nv, range),
        )
            .prop_map(|(ll, lv, vl, vv)| BlockPartition::new(ll, lv, vl, vv).unwrap())
    })
}

fn one_hot(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(0..cols, rows).prop_map(move |picks| {
        Matrix::from_fn(rows, cols, |i, j| if picks[i] == j { 1.0 } else { 0.0 })
    })
}

fn one_hot_partition(max_n: usize) -> impl Strategy<Value = BlockPartition> {
    (1..=max_n, 1..=max_n).prop_flat_map(|(nl, nv)| {
        (matrix(nl, nl, 3.0), one_hot(nl, nv), one_hot(nv, nl), matrix(nv, nv, 3.0))
            .prop_map(|(ll, lv, vl, vv)| BlockPartition::new(ll, lv, vl, vv).unwrap())
    })
}

fn distribution_rows(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    matrix(rows, cols, 4.0).prop_map(|m| row_softmax(&m).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn loop_oracle_equals_closed_form(p in partition(8, 3.0)) {
        let v = relative_error(&soft_equivalence_oracle_v(&p), &change_of_basis_v(&p).unwrap());
        let l = relative_error(&soft_equivalence_oracle_l(&p), &change_of_basis_l(&p).unwrap());
        prop_assert!(v < ORACLE_TOLERANCE, "vision side {v:e}");
        prop_assert!(l < ORACLE_TOLERANCE, "language side {l:e}");
    }

    #[test]
    fn hard_is_soft_on_one_hot_rows(p in one_hot_partition(8)) {
        prop_assert_eq!(hard_equivalence_v(&p), change_of_basis_v(&p).unwrap());
        prop_assert_eq!(hard_equivalence_l(&p), change_of_basis_l(&p).unwrap());
    }

    #[test]
    fn congruence_loss_is_non_negative(p in partition(8, 3.0)) {
        let loss = cacr_total(&p).unwrap();
        prop_assert!(loss.loss_l >= 0.0 && loss.loss_v >= 0.0);
        prop_assert!((loss.total - (loss.loss_l + loss.loss_v)).abs() <= 1e-12 * loss.total.max(1.0));
    }
}

proptest! {
    #[test]
    fn mkl_is_symmetric_and_non_negative(
        (a, b) in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| (distribution_rows(r, c), distribution_rows(r, c)))
    ) {
        let ab = mkl(&a, &b).unwrap().value;
        let ba = mkl(&b, &a).unwrap().value;
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        prop_assert!(mkl(&a, &a).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(m in (1usize..6, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c, 50.0)), shift in -500.0f64..500.0) {
        let s = row_softmax(&m).unwrap();
        for i in 0..s.rows() {
            let sum: f64 = s.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.row(i).iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let shifted = Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) + shift);
        let t = row_softmax(&shifted).unwrap();
        for (x, y) in s.data().iter().zip(t.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_matches_triple_loop(
        (a, b) in (1usize..7, 1usize..7, 1usize..7).prop_flat_map(|(n, k, m)| (matrix(n, k, 5.0), matrix(k, m, 5.0)))
    ) {
        let c = matmul(&a, &b).unwrap();
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                prop_assert!((c.get(i, j) - acc).abs() <= 1e-12 * (1.0 + acc.abs()));
            }
        }
    }

    #[test]
    fn partition_reassembles_exactly(p in partition(8, 3.0)) {
        let bundle = p.reassemble();
        prop_assert_eq!(bundle.n_lang(), p.n_lang());
        prop_assert_eq!(bundle.partition(), p.clone());
        let again = AttentionBundle::new(p.n_lang(), p.n_vis(), bundle.scores().clone()).unwrap();
        prop_assert_eq!(again, bundle);
    }

    #[test]
    fn side_gradients_sum_to_total(p in partition(5, 2.0)) {
        let (_, gl) = cacr_l_gradients(&p).unwrap();
        let (_, gv) = cacr_v_gradients(&p).unwrap();
        let total = cacr_gradients(&p).unwrap();
        let sum = gl.add(&gv).unwrap();
        let diff = sum.to_joint().add(&total.to_joint().scale(-1.0)).unwrap();
        prop_assert!(diff.max_abs() <= 1e-10 * (1.0 + total.norm()));
    }

    #[test]
    fn argmax_entropy_within_bounds(p in partition(8, 3.0)) {
        let r = argmax_entropy(&argmax_correspondence(&p)).unwrap();
        let ub = EntropyReport::upper_bound(p.n_lang(), p.n_vis()) + 1e-12;
        prop_assert!((0.0..=ub).contains(&r.lang_to_vis_entropy));
        prop_assert!((0.0..=ub).contains(&r.vis_to_lang_entropy));
    }

    #[test]
    fn permutation_fixed_points_have_zero_loss(seed in any::<u64>(), n in 1usize..8) {
        let p = permutation_fixed_point(&mut case_rng(seed, 0), n, 3.0);
        prop_assert!(cacr_total(&p).unwrap().total.abs() < 1e-9);
    }
}
