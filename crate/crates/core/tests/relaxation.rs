use diffsort_core::diffsort::{relaxed_sort, relaxed_swap};
use diffsort_core::sigmoid::{soft_min_with_zero, SigmoidKind, SigmoidSpec};
use diffsort_core::{Matrix, NetworkKind, SortingNetwork};
use proptest::prelude::*;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect()
}

/// One layer of swaps written out as a dense matrix.
fn swap_matrix(n: usize, lo: usize, hi: usize, alpha: f64) -> Vec<Vec<f64>> {
    let mut m = identity(n);
    m[lo][lo] = alpha;
    m[hi][hi] = alpha;
    m[lo][hi] = 1.0 - alpha;
    m[hi][lo] = 1.0 - alpha;
    m
}

fn mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect())
        .collect()
}

#[test]
fn three_wire_matrix_by_hand() {
    let x = [0.7, -0.2, 0.1];
    let beta = 3.0;
    let net = SortingNetwork::odd_even(3).unwrap();
    let p = relaxed_sort(&net, &SigmoidSpec::logistic(beta).unwrap(), &x, true)
        .unwrap()
        .perm
        .unwrap();

    // layers (0,1), (1,2), (0,1)
    let mut v = x.to_vec();
    let mut total = identity(3);
    for (lo, hi) in [(0, 1), (1, 2), (0, 1)] {
        let a = logistic(beta * (v[hi] - v[lo]));
        let (l, h) = (v[lo], v[hi]);
        v[lo] = a * l + (1.0 - a) * h;
        v[hi] = a * h + (1.0 - a) * l;
        total = mul(&swap_matrix(3, lo, hi, a), &total);
    }
    for r in 0..3 {
        for c in 0..3 {
            assert!((p[(r, c)] - total[r][c]).abs() < 1e-14, "({r},{c})");
        }
    }
    let pv = p.matvec(&x);
    for (a, b) in pv.iter().zip(&v) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn sorted_values_are_p_times_x() {
    let net = SortingNetwork::bitonic(8).unwrap();
    let spec = SigmoidSpec::cauchy(2.0).unwrap();
    let x = [0.3, -1.2, 2.2, 0.0, 0.9, -0.4, 1.5, -2.0];
    let r = relaxed_sort(&net, &spec, &x, true).unwrap();
    let px = r.perm.unwrap().matvec(&x);
    for (a, b) in px.iter().zip(&r.sorted_values) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn error_suprema_at_unit_lipschitz() {
    // deviation of min_f(x, 0) from min(x, 0), relative to the slope scale
    let sup = |kind: SigmoidKind| {
        let spec = SigmoidSpec::unit_lipschitz(kind).unwrap();
        let linear = (0..=200_000).map(|i| -50.0 + 100.0 * i as f64 / 200_000.0);
        let tail = (0..=1000).map(|i| 10f64.powf(1.0 + 2.0 * i as f64 / 1000.0));
        linear
            .chain(tail)
            .map(|x: f64| (soft_min_with_zero(&spec, x) - x.min(0.0)).abs())
            .fold(0.0f64, f64::max)
    };
    assert!((sup(SigmoidKind::Optimal) - 1.0 / 16.0).abs() < 1e-3);
    assert!((sup(SigmoidKind::Cauchy) - 1.0 / std::f64::consts::PI.powi(2)).abs() < 1e-3);
    assert!((sup(SigmoidKind::Logistic) - 0.0696).abs() < 1e-3);
    assert!(sup(SigmoidKind::Reciprocal) >= 0.249);
}

fn any_kind() -> impl Strategy<Value = SigmoidKind> {
    prop::sample::select(SigmoidKind::ALL.to_vec())
}

fn any_beta() -> impl Strategy<Value = f64> {
    prop::sample::select(vec![0.5, 1.0, 10.0, 100.0])
}

proptest! {
    #[test]
    fn swap_axioms(kind in any_kind(), beta in any_beta(), a in -20.0..20.0f64, b in -20.0..20.0f64, c in -20.0..20.0f64) {
        let spec = SigmoidSpec::new(kind, beta).unwrap();
        let tol = 1e-9 * (1.0 + a.abs() + b.abs() + c.abs());
        let (mn, mx, _) = relaxed_swap(&spec, a, b).unwrap();
        let (mn_s, mx_s, _) = relaxed_swap(&spec, b, a).unwrap();
        prop_assert!((mn - mn_s).abs() < tol && (mx - mx_s).abs() < tol);
        prop_assert!(mn <= mx + tol);
        prop_assert!((mn + mx - a - b).abs() < tol);
        prop_assert!(mn >= a.min(b) - tol && mx <= a.max(b) + tol);
        let (mn_i, mx_i, _) = relaxed_swap(&spec, -a, -b).unwrap();
        prop_assert!((mn + mx_i).abs() < tol && (mx + mn_i).abs() < tol);
        let (mn_c, mx_c, _) = relaxed_swap(&spec, a + c, b + c).unwrap();
        prop_assert!((mn_c - mn - c).abs() < tol && (mx_c - mx - c).abs() < tol);
        let (aa, bb, _) = relaxed_swap(&spec, a, a).unwrap();
        prop_assert!((aa - a).abs() < tol && (bb - a).abs() < tol);
    }

    #[test]
    fn relaxed_matrix_is_doubly_stochastic(
        kind in any_kind(),
        beta in any_beta(),
        bitonic in any::<bool>(),
        x in prop::collection::vec(-5.0..5.0f64, 8),
    ) {
        let net_kind = if bitonic { NetworkKind::Bitonic } else { NetworkKind::OddEven };
        let net = SortingNetwork::build(net_kind, 8).unwrap();
        let spec = SigmoidSpec::new(kind, beta).unwrap();
        let r = relaxed_sort(&net, &spec, &x, true).unwrap();
        let p: Matrix = r.perm.unwrap();
        for s in p.row_sums().into_iter().chain(p.col_sums()) {
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
        prop_assert!(p.as_slice().iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        let drift: f64 = x.iter().sum::<f64>() - r.sorted_values.iter().sum::<f64>();
        prop_assert!(drift.abs() < 1e-9);
    }

    #[test]
    fn hard_sort_matches_std(x in prop::collection::vec(-1e3..1e3f64, 1..40)) {
        let (sorted, perm) = SortingNetwork::odd_even(x.len()).unwrap().hard_sort(&x).unwrap();
        let mut expected = x.clone();
        expected.sort_by(f64::total_cmp);
        prop_assert_eq!(&sorted, &expected);
        for (c, &r) in perm.iter().enumerate() {
            prop_assert_eq!(sorted[r], x[c]);
        }
    }

    #[test]
    fn monotonic_kinds_give_monotone_outputs(
        kind in prop::sample::select(vec![SigmoidKind::Reciprocal, SigmoidKind::Cauchy, SigmoidKind::Optimal]),
        x in prop::collection::vec(-3.0..3.0f64, 6),
        i in 0usize..6,
        dx in 1e-3..1.0f64,
    ) {
        let net = SortingNetwork::odd_even(6).unwrap();
        let spec = SigmoidSpec::unit_lipschitz(kind).unwrap();
        let before = relaxed_sort(&net, &spec, &x, false).unwrap().sorted_values;
        let mut bumped = x.clone();
        bumped[i] += dx;
        let after = relaxed_sort(&net, &spec, &bumped, false).unwrap().sorted_values;
        for (a, b) in before.iter().zip(&after) {
            prop_assert!(b >= &(a - 1e-12));
        }
    }
}

#[test]
fn large_beta_approaches_hard_permutation() {
    let x = [0.5, -0.3, 0.9, 0.1, -0.8];
    let net = SortingNetwork::odd_even(5).unwrap();
    let (_, perm) = net.hard_sort(&x).unwrap();
    for kind in SigmoidKind::ALL {
        let spec = SigmoidSpec::new(kind, 1e6).unwrap();
        let p = relaxed_sort(&net, &spec, &x, true).unwrap().perm.unwrap();
        for c in 0..5 {
            assert!(p[(perm[c], c)] > 1.0 - 1e-3, "{kind}");
        }
    }
}
