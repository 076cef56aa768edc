//! Invariant suites run by the `props` subcommand.
//!
//! Each suite draws its own random cases from a seeded generator and reports
//! whether every case held, with a short detail string.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffsort::{relaxed_sort, relaxed_swap};
use crate::error::Result;
use crate::model::Mlp;
use crate::network::{NetworkKind, SortingNetwork};
use crate::optim::{bootstrap_weights, direct_gd_step, newton_loss_grad, two_stage_gd_step};
use crate::optim::{CurvatureKind, LossKind, NewtonLossSpec};
use crate::sigmoid::{soft_min_with_zero, SigmoidKind, SigmoidSpec};
use crate::topk::topk_rows;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Case counts; `scale = 1.0` is the default workload.
#[derive(Debug, Clone, Copy)]
pub struct PropsOptions {
    pub seed: u64,
    pub scale: f64,
}

impl Default for PropsOptions {
    fn default() -> Self {
        PropsOptions { seed: 0, scale: 1.0 }
    }
}

impl PropsOptions {
    fn count(&self, base: usize) -> usize {
        ((base as f64 * self.scale).ceil() as usize).max(1)
    }

    fn rng(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9).wrapping_add(salt))
    }
}

type Suite = fn(&PropsOptions) -> Result<(bool, String)>;

pub const SUITES: [(&str, Suite); 10] = [
    ("zero_one_principle", zero_one_principle),
    ("layer_counts", layer_counts),
    ("doubly_stochastic", doubly_stochastic),
    ("swap_axioms", swap_axioms),
    ("monotonicity", monotonicity),
    ("layer_sum_preservation", layer_sum_preservation),
    ("hard_limit", hard_limit),
    ("topk_rows_match_full", topk_rows_match_full),
    ("bootstrap_weights", bootstrap_enumeration),
    ("two_stage_equivalence", two_stage_equivalence),
];

pub fn run_all(opts: &PropsOptions) -> Vec<SuiteResult> {
    SUITES
        .iter()
        .map(|(name, suite)| {
            let t = Instant::now();
            let (passed, detail) = suite(opts).unwrap_or_else(|e| (false, format!("error: {e}")));
            SuiteResult {
                name,
                passed,
                detail,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn spec_grid() -> Vec<SigmoidSpec> {
    let mut out = Vec::new();
    for kind in SigmoidKind::ALL {
        for beta in [1.0, 10.0, 100.0] {
            out.push(SigmoidSpec::new(kind, beta).expect("valid"));
        }
    }
    out
}

fn zero_one_principle(_: &PropsOptions) -> Result<(bool, String)> {
    let mut checked = 0u64;
    for n in 1..=12usize {
        for kind in [NetworkKind::OddEven, NetworkKind::Bitonic] {
            let Ok(net) = SortingNetwork::build(kind, n) else {
                continue;
            };
            for bits in 0..1u64 << n {
                let ones = bits.count_ones();
                let expected = if ones == 0 { 0 } else { ((1u64 << ones) - 1) << (n as u32 - ones) };
                if net.sort_bits(bits) != expected {
                    return Ok((false, format!("{kind:?} n={n} fails on {bits:b}")));
                }
                checked += 1;
            }
        }
    }
    Ok((true, format!("{checked} binary inputs sorted")))
}

fn layer_counts(_: &PropsOptions) -> Result<(bool, String)> {
    for (n, layers) in [(16, 10), (32, 15), (1024, 55)] {
        let got = SortingNetwork::bitonic(n)?.num_layers();
        if got != layers {
            return Ok((false, format!("bitonic {n}: {got} layers, expected {layers}")));
        }
    }
    for n in 1..=64 {
        if SortingNetwork::odd_even(n)?.num_layers() != n {
            return Ok((false, format!("odd-even {n} layer count")));
        }
    }
    Ok((true, "bitonic 16/32/1024 -> 10/15/55, odd-even n -> n".into()))
}

fn doubly_stochastic(opts: &PropsOptions) -> Result<(bool, String)> {
    let mut rng = opts.rng(3);
    let mut worst = 0.0f64;
    for n in [4, 8, 16] {
        let net = SortingNetwork::odd_even(n)?;
        for spec in spec_grid() {
            for _ in 0..opts.count(20) {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
                let p = relaxed_sort(&net, &spec, &x, true)?.perm.expect("materialised");
                for s in p.row_sums().into_iter().chain(p.col_sums()) {
                    worst = worst.max((s - 1.0).abs());
                }
            }
        }
    }
    Ok((worst < 1e-6, format!("max |sum - 1| = {worst:.2e}")))
}

fn swap_axioms(opts: &PropsOptions) -> Result<(bool, String)> {
    let mut rng = opts.rng(4);
    let tol = 1e-9;
    for spec in spec_grid() {
        for _ in 0..opts.count(2000) {
            let a = rng.random_range(-10.0..10.0);
            let b = rng.random_range(-10.0..10.0);
            let c = rng.random_range(-10.0..10.0);
            let (mn, mx, _) = relaxed_swap(&spec, a, b)?;
            let (mn_s, mx_s, _) = relaxed_swap(&spec, b, a)?;
            let (mn_i, mx_i, _) = relaxed_swap(&spec, -a, -b)?;
            let (mn_c, mx_c, _) = relaxed_swap(&spec, a + c, b + c)?;
            let (aa, bb, _) = relaxed_swap(&spec, a, a)?;
            let scale = 1.0 + a.abs().max(b.abs()).max(c.abs());
            let checks = [
                ("symmetry", (mn - mn_s).abs().max((mx - mx_s).abs())),
                ("ordering", (mn - mx).max(0.0)),
                ("idempotency", (aa - a).abs().max((bb - a).abs())),
                ("inversion", (mn + mx_i).abs().max((mx + mn_i).abs())),
                ("stability", (mn_c - mn - c).abs().max((mx_c - mx - c).abs())),
                ("sum", (mn + mx - a - b).abs()),
                ("bounded", (a.min(b) - mn).max(mx - a.max(b)).max(0.0)),
            ];
            for (name, err) in checks {
                if err > tol * scale {
                    return Ok((
                        false,
                        format!("{name} violated for {} beta={} at ({a}, {b}, {c}): {err:e}", spec.kind, spec.beta),
                    ));
                }
            }
        }
    }
    Ok((true, "symmetry, ordering, idempotency, inversion, stability, sum, boundedness".into()))
}

/// Grid over `[-1e3, 1e3]`, dense near the origin.
pub fn monotonicity_grid() -> Vec<f64> {
    let mut g: Vec<f64> = (0..=4000).map(|i| -10.0 + 20.0 * i as f64 / 4000.0).collect();
    for i in 0..=400 {
        let t = 10f64.powf(1.0 + 2.0 * i as f64 / 400.0);
        g.push(t);
        g.push(-t);
    }
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Smallest discrete slope of `min_f(x, 0)` over the grid.
pub fn min_discrete_slope(spec: &SigmoidSpec, grid: &[f64]) -> f64 {
    grid.windows(2)
        .map(|w| (soft_min_with_zero(spec, w[1]) - soft_min_with_zero(spec, w[0])) / (w[1] - w[0]))
        .fold(f64::INFINITY, f64::min)
}

fn monotonicity(_: &PropsOptions) -> Result<(bool, String)> {
    let grid = monotonicity_grid();
    let mut detail = Vec::new();
    let mut ok = true;
    for kind in SigmoidKind::ALL {
        let spec = match kind {
            SigmoidKind::LogisticArt => SigmoidSpec::new(kind, 1.0)?,
            _ => SigmoidSpec::unit_lipschitz(kind)?,
        };
        let slope = min_discrete_slope(&spec, &grid);
        let monotone = slope >= -1e-12;
        if kind.is_monotonic() != monotone && kind != SigmoidKind::LogisticArt {
            ok = false;
        }
        detail.push(format!("{kind}: {slope:.2e}"));
    }
    Ok((ok, format!("min slope {}", detail.join(", "))))
}

fn layer_sum_preservation(opts: &PropsOptions) -> Result<(bool, String)> {
    let mut rng = opts.rng(6);
    let mut worst = 0.0f64;
    for spec in spec_grid() {
        for _ in 0..opts.count(20) {
            let n = rng.random_range(2..=16);
            let net = SortingNetwork::odd_even(n)?;
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let y = relaxed_sort(&net, &spec, &x, false)?.sorted_values;
            let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
            worst = worst.max((sx - sy).abs());
        }
    }
    Ok((worst < 1e-9, format!("max |sum drift| = {worst:.2e}")))
}

fn hard_limit(opts: &PropsOptions) -> Result<(bool, String)> {
    let mut rng = opts.rng(7);
    for _ in 0..opts.count(50) {
        let n = rng.random_range(2..=8);
        let net = SortingNetwork::odd_even(n)?;
        let mut x: Vec<f64> = (0..n).map(|i| 0.1 * i as f64).collect();
        for i in (1..n).rev() {
            x.swap(i, rng.random_range(0..=i));
        }
        let (_, perm) = net.hard_sort(&x)?;
        let mut prev = f64::INFINITY;
        for beta in [1e2, 1e3, 1e4] {
            let spec = SigmoidSpec::logistic(beta)?;
            let p = relaxed_sort(&net, &spec, &x, true)?.perm.expect("materialised");
            let mut dist = 0.0f64;
            for c in 0..n {
                for r in 0..n {
                    let hard = if perm[c] == r { 1.0 } else { 0.0 };
                    dist = dist.max((p[(r, c)] - hard).abs());
                }
            }
            if dist > prev + 1e-12 {
                return Ok((false, format!("distance grew to {dist} at beta={beta}")));
            }
            prev = dist;
        }
        if prev > 1e-3 {
            return Ok((false, format!("beta=1e4 distance {prev}")));
        }
    }
    Ok((true, "P approaches the hard permutation as beta grows".into()))
}

fn topk_rows_match_full(opts: &PropsOptions) -> Result<(bool, String)> {
    let mut rng = opts.rng(8);
    let mut worst = 0.0f64;
    for n in [8, 16, 32] {
        for kind in [NetworkKind::OddEven, NetworkKind::Bitonic] {
            let net = SortingNetwork::build(kind, n)?;
            let spec = SigmoidSpec::cauchy(5.0)?;
            for _ in 0..opts.count(5) {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let p = relaxed_sort(&net, &spec, &x, true)?.perm.expect("materialised");
                for k in [1, 5] {
                    let rows = topk_rows(&net, &spec, &x, k)?;
                    for r in 0..k {
                        for c in 0..n {
                            worst = worst.max((rows[(r, c)] - p[(r, c)]).abs());
                        }
                    }
                }
            }
        }
    }
    Ok((worst < 1e-9, format!("max deviation {worst:.2e}")))
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn bootstrap_enumeration(_: &PropsOptions) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for m in 1..=8usize {
        for k in 1..=m {
            let w = bootstrap_weights(m, k)?;
            let mut counts = vec![0.0; m];
            for mask in 0u32..1 << m {
                if mask.count_ones() as usize == k {
                    counts[mask.trailing_zeros() as usize] += 1.0;
                }
            }
            let total = binomial(m, k);
            for r in 0..m {
                worst = worst.max((w[r] - counts[r] / total).abs());
            }
        }
    }
    Ok((worst < 1e-12, format!("max deviation from enumeration {worst:.2e}")))
}

fn two_stage_equivalence(opts: &PropsOptions) -> Result<(bool, String)> {
    let mut rng = opts.rng(10);
    let mut worst = 0.0f64;
    for _ in 0..opts.count(20) {
        let dims = [rng.random_range(1..6), rng.random_range(1..8), rng.random_range(1..4)];
        let model = Mlp::init(&dims, rng.random())?;
        let batch = rng.random_range(1..5);
        let x: Vec<f64> = (0..batch * dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..batch * dims[2]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad = |y: &[f64]| y.iter().zip(&t).map(|(a, b)| (a - b).powi(3)).collect::<Vec<_>>();
        let lr = rng.random_range(0.0..0.1);
        let (mut a, mut b) = (model.clone(), model);
        two_stage_gd_step(&mut a, &x, grad, lr)?;
        direct_gd_step(&mut b, &x, grad, lr)?;
        for (p, q) in a.params().iter().zip(b.params()) {
            worst = worst.max((p - q).abs());
        }
    }
    let spec = NewtonLossSpec::new(CurvatureKind::ElementwiseHessian, LossKind::Mse).with_damping(0.0);
    let y = vec![vec![0.1, -2.3, 4.7]];
    let t = vec![vec![0.3, 0.4, -1.1]];
    let g = newton_loss_grad(&spec, &y, &t)?;
    let plain: Vec<f64> = y[0].iter().zip(&t[0]).map(|(a, b)| a - b).collect();
    let bit_equal = g[0].iter().zip(&plain).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((
        worst < 1e-10 && bit_equal,
        format!("max parameter gap {worst:.2e}, MSE Newton gradient bit-equal: {bit_equal}"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_at_small_scale() {
        let results = run_all(&PropsOptions { seed: 1, scale: 0.1 });
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert_eq!(results.len(), SUITES.len());
    }

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(5, 2), 10.0);
        assert_eq!(binomial(3, 4), 0.0);
    }
}
