//! Relaxed execution of sorting networks.
//!
//! Every comparator `(lo, hi)` is replaced by a continuous conditional swap
//! with mixing coefficient `alpha = f(s * (b - a))`, where `a`, `b` are the
//! current values on the two wires and `s` is the comparator direction:
//!
//! ```text
//! lo' = alpha * a + (1 - alpha) * b
//! hi' = alpha * b + (1 - alpha) * a
//! ```
//!
//! Each layer is thus a sparse doubly-stochastic matrix `P_l`, and the
//! relaxed permutation matrix is `P = P_L ... P_1`. Row `r` of `P` is the
//! distribution over inputs landing on rank `r`; column `c` is the
//! distribution over ranks for input `c`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_all_finite, ensure_finite, Error, Result};
use crate::matrix::Matrix;
use crate::network::{Comparator, SortingNetwork};
use crate::sigmoid::SigmoidSpec;

/// Lower clamp applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedSortResult {
    /// Relaxed sorted values, equal to `P x`.
    pub sorted_values: Vec<f64>,
    /// Swap coefficient of every comparator, indexed like `net.layers()`.
    pub alphas: Vec<Vec<f64>>,
    /// The relaxed permutation matrix, when requested.
    pub perm: Option<Matrix>,
}

/// A ground-truth ranking: `ranks[c]` is the rank of element `c`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroundTruthPermutation {
    ranks: Vec<usize>,
}

impl GroundTruthPermutation {
    pub fn new(ranks: Vec<usize>) -> Result<Self> {
        let n = ranks.len();
        let mut seen = vec![false; n];
        for &r in &ranks {
            if r >= n || seen[r] {
                return Err(Error::InvalidParameter(format!(
                    "{ranks:?} is not a permutation of 0..{n}"
                )));
            }
            seen[r] = true;
        }
        Ok(GroundTruthPermutation { ranks })
    }

    pub fn identity(n: usize) -> Self {
        GroundTruthPermutation {
            ranks: (0..n).collect(),
        }
    }

    /// From a sorted order: `order[r]` is the element at rank `r`.
    pub fn from_order(order: &[usize]) -> Result<Self> {
        let mut ranks = vec![usize::MAX; order.len()];
        for (r, &c) in order.iter().enumerate() {
            if c >= order.len() || ranks[c] != usize::MAX {
                return Err(Error::InvalidParameter(format!(
                    "{order:?} is not a permutation"
                )));
            }
            ranks[c] = r;
        }
        Ok(GroundTruthPermutation { ranks })
    }

    /// Ascending ranking of `scores`, ties broken by index.
    pub fn from_scores(scores: &[f64]) -> Self {
        Self::from_order(&argsort(scores)).expect("argsort yields a permutation")
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn order(&self) -> Vec<usize> {
        let mut order = vec![0; self.ranks.len()];
        for (c, &r) in self.ranks.iter().enumerate() {
            order[r] = c;
        }
        order
    }

    /// One-hot matrix with `Q[rank(c)][c] = 1`.
    pub fn to_matrix(&self) -> Matrix {
        let n = self.ranks.len();
        let mut q = Matrix::zeros(n, n);
        for (c, &r) in self.ranks.iter().enumerate() {
            q[(r, c)] = 1.0;
        }
        q
    }
}

/// Stable ascending argsort (ties keep index order).
pub fn argsort(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx
}

/// Continuous conditional swap of `(a, b)` in ascending direction.
///
/// Returns `(min_f, max_f, alpha)` with `alpha = f(b - a)`.
pub fn relaxed_swap(spec: &SigmoidSpec, a: f64, b: f64) -> Result<(f64, f64, f64)> {
    ensure_finite(a, "swap input")?;
    ensure_finite(b, "swap input")?;
    let alpha = spec.value(b - a);
    Ok((
        a * alpha + b * (1.0 - alpha),
        b * alpha + a * (1.0 - alpha),
        alpha,
    ))
}

#[inline]
fn comparator_alpha(spec: &SigmoidSpec, c: &Comparator, a: f64, b: f64) -> f64 {
    spec.value(c.direction.sign() * (b - a))
}

/// Forward activations kept for the reverse pass.
struct Trace {
    /// `values[l]` is the wire state before layer `l`; the last entry is the output.
    values: Vec<Vec<f64>>,
    alphas: Vec<Vec<f64>>,
    /// `prefix[l]` is `P_{l-1} ... P_1` (before layer `l`), when tracked.
    prefix: Vec<Matrix>,
    perm: Option<Matrix>,
}

fn forward(net: &SortingNetwork, spec: &SigmoidSpec, x: &[f64], perm: bool, keep_prefix: bool) -> Result<Trace> {
    net.check_len(x.len())?;
    ensure_all_finite(x, "relaxed_sort input")?;
    spec.validate()?;
    let n = net.n();
    let mut values = Vec::with_capacity(net.num_layers() + 1);
    let mut alphas = Vec::with_capacity(net.num_layers());
    let mut prefix = Vec::new();
    let mut v = x.to_vec();
    let mut p = (perm || keep_prefix).then(|| Matrix::identity(n));
    for layer in net.layers() {
        values.push(v.clone());
        if keep_prefix {
            prefix.push(p.clone().expect("tracked"));
        }
        let mut layer_alphas = Vec::with_capacity(layer.len());
        for c in layer {
            let (a, b) = (v[c.lo], v[c.hi]);
            let alpha = comparator_alpha(spec, c, a, b);
            v[c.lo] = alpha * a + (1.0 - alpha) * b;
            v[c.hi] = alpha * b + (1.0 - alpha) * a;
            if let Some(p) = p.as_mut() {
                let (rl, rh) = p.row_pair_mut(c.lo, c.hi);
                for (ul, uh) in rl.iter_mut().zip(rh.iter_mut()) {
                    let (pl, ph) = (*ul, *uh);
                    *ul = alpha * pl + (1.0 - alpha) * ph;
                    *uh = alpha * ph + (1.0 - alpha) * pl;
                }
            }
            layer_alphas.push(alpha);
        }
        alphas.push(layer_alphas);
    }
    values.push(v);
    Ok(Trace {
        values,
        alphas,
        prefix,
        perm: p,
    })
}

/// Runs the network with relaxed swaps, optionally accumulating `P`.
pub fn relaxed_sort(
    net: &SortingNetwork,
    spec: &SigmoidSpec,
    x: &[f64],
    materialize_perm: bool,
) -> Result<RelaxedSortResult> {
    let mut trace = forward(net, spec, x, materialize_perm, false)?;
    Ok(RelaxedSortResult {
        sorted_values: trace.values.pop().expect("at least the input"),
        alphas: trace.alphas,
        perm: trace.perm,
    })
}

/// Signed comparator arguments `s * (b - a)` seen during relaxed
/// execution, indexed like `net.layers()`.
pub fn comparator_arguments(net: &SortingNetwork, spec: &SigmoidSpec, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let trace = forward(net, spec, x, false, false)?;
    Ok(net
        .layers()
        .iter()
        .zip(&trace.values)
        .map(|(layer, v)| {
            layer
                .iter()
                .map(|c| c.direction.sign() * (v[c.hi] - v[c.lo]))
                .collect()
        })
        .collect())
}

/// Reverse-mode product: gradient w.r.t. `x` of a loss whose gradient is
/// `grad_perm` w.r.t. `P` (n x n, or its top `k` rows) and `grad_sorted`
/// w.r.t. the relaxed sorted values.
pub fn vjp(
    net: &SortingNetwork,
    spec: &SigmoidSpec,
    x: &[f64],
    grad_perm: Option<&Matrix>,
    grad_sorted: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let n = net.n();
    if let Some(g) = grad_perm {
        if g.cols() != n || g.rows() > n {
            return Err(Error::ShapeMismatch(format!(
                "permutation gradient is {}x{}, network has {n} wires",
                g.rows(),
                g.cols()
            )));
        }
    }
    if let Some(g) = grad_sorted {
        net.check_len(g.len())?;
    }
    let trace = forward(net, spec, x, false, grad_perm.is_some())?;
    let mut gv = grad_sorted.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let mut gp = grad_perm.map(|g| {
        let mut full = Matrix::zeros(n, n);
        for r in 0..g.rows() {
            full.row_mut(r).copy_from_slice(g.row(r));
        }
        full
    });

    for (l, layer) in net.layers().iter().enumerate().rev() {
        let v = &trace.values[l];
        for (c, &alpha) in layer.iter().zip(&trace.alphas[l]) {
            let (a, b) = (v[c.lo], v[c.hi]);
            let (gl, gh) = (gv[c.lo], gv[c.hi]);
            let mut d_alpha = (gl - gh) * (a - b);
            if let Some(gp) = gp.as_mut() {
                let before = &trace.prefix[l];
                let (pl, ph) = (before.row(c.lo), before.row(c.hi));
                let (rl, rh) = gp.row_pair_mut(c.lo, c.hi);
                for j in 0..n {
                    let (ul, uh) = (rl[j], rh[j]);
                    d_alpha += (ul - uh) * (pl[j] - ph[j]);
                    rl[j] = alpha * ul + (1.0 - alpha) * uh;
                    rh[j] = (1.0 - alpha) * ul + alpha * uh;
                }
            }
            let s = c.direction.sign();
            let d_diff = d_alpha * s * spec.slope(s * (b - a));
            gv[c.lo] = alpha * gl + (1.0 - alpha) * gh - d_diff;
            gv[c.hi] = (1.0 - alpha) * gl + alpha * gh + d_diff;
        }
    }
    Ok(gv)
}

fn check_square(p: &Matrix, q: &GroundTruthPermutation) -> Result<()> {
    let n = q.len();
    if p.rows() != n || p.cols() != n {
        return Err(Error::ShapeMismatch(format!(
            "P is {}x{}, ground truth has {n} elements",
            p.rows(),
            p.cols()
        )));
    }
    Ok(())
}

/// Binary cross-entropy between `P` and the one-hot `Q`, averaged over all
/// entries (equivalently: the mean over columns of the per-column mean).
pub fn ranking_ce_loss(p: &Matrix, q: &GroundTruthPermutation) -> Result<f64> {
    check_square(p, q)?;
    let n = q.len();
    let mut total = 0.0;
    for c in 0..n {
        let target = q.ranks()[c];
        for r in 0..n {
            let v = p[(r, c)];
            total -= if r == target {
                v.max(LOG_FLOOR).ln()
            } else {
                (1.0 - v).max(LOG_FLOOR).ln()
            };
        }
    }
    Ok(total / (n * n) as f64)
}

/// Gradient of [`ranking_ce_loss`] with respect to `P`.
pub fn ranking_ce_grad(p: &Matrix, q: &GroundTruthPermutation) -> Result<Matrix> {
    check_square(p, q)?;
    let n = q.len();
    let scale = 1.0 / (n * n) as f64;
    let mut g = Matrix::zeros(n, n);
    for c in 0..n {
        let target = q.ranks()[c];
        for r in 0..n {
            let v = p[(r, c)];
            g[(r, c)] = if r == target {
                if v > LOG_FLOOR {
                    -scale / v
                } else {
                    0.0
                }
            } else if 1.0 - v > LOG_FLOOR {
                scale / (1.0 - v)
            } else {
                0.0
            };
        }
    }
    Ok(g)
}

/// Ranking loss of `x` against `q` and its gradient with respect to `x`.
pub fn loss_and_grad(
    net: &SortingNetwork,
    spec: &SigmoidSpec,
    x: &[f64],
    q: &GroundTruthPermutation,
) -> Result<(f64, Vec<f64>)> {
    let res = relaxed_sort(net, spec, x, true)?;
    let p = res.perm.expect("materialised");
    let loss = ranking_ce_loss(&p, q)?;
    let gp = ranking_ce_grad(&p, q)?;
    Ok((loss, vjp(net, spec, x, Some(&gp), None)?))
}

/// Gradient of `ranking_ce_loss(relaxed_sort(x).P, q)` with respect to `x`.
pub fn backward(
    net: &SortingNetwork,
    spec: &SigmoidSpec,
    x: &[f64],
    q: &GroundTruthPermutation,
) -> Result<Vec<f64>> {
    loss_and_grad(net, spec, x, q).map(|(_, g)| g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    /// Fraction of tuples ranked exactly right.
    pub em: f64,
    /// Fraction of elements assigned their correct rank.
    pub ew: f64,
    /// Exact match on consecutive groups of five elements.
    pub em5: Option<f64>,
}

/// Exact-match and element-wise ranking accuracy of hard predictions.
pub fn ranking_metrics(
    pred_scores: &[Vec<f64>],
    truth: &[GroundTruthPermutation],
    with_em5: bool,
) -> Result<RankingMetrics> {
    if pred_scores.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    if pred_scores.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: pred_scores.len(),
        });
    }
    let n = truth[0].len();
    if with_em5 && n < 5 {
        return Err(Error::InvalidParameter(format!(
            "EM5 needs at least 5 elements per tuple, got {n}"
        )));
    }
    let (mut exact, mut correct, mut groups, mut groups_exact) = (0usize, 0usize, 0usize, 0usize);
    for (scores, t) in pred_scores.iter().zip(truth) {
        if scores.len() != t.len() || t.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: scores.len(),
            });
        }
        let pred = GroundTruthPermutation::from_scores(scores);
        let hits = pred.ranks().iter().zip(t.ranks()).filter(|(a, b)| a == b).count();
        correct += hits;
        exact += usize::from(hits == n);
        if with_em5 {
            for g in 0..n / 5 {
                let span = g * 5..g * 5 + 5;
                let ps = GroundTruthPermutation::from_scores(&scores[span.clone()]);
                let tr: Vec<f64> = t.ranks()[span].iter().map(|&r| r as f64).collect();
                let ts = GroundTruthPermutation::from_scores(&tr);
                groups += 1;
                groups_exact += usize::from(ps == ts);
            }
        }
    }
    let m = pred_scores.len() as f64;
    Ok(RankingMetrics {
        em: exact as f64 / m,
        ew: correct as f64 / (m * n as f64),
        em5: with_em5.then(|| groups_exact as f64 / groups as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigmoid::SigmoidKind;

    #[test]
    fn swap_examples() {
        let s = SigmoidSpec::logistic(1.0).unwrap();
        assert_eq!(relaxed_swap(&s, 0.0, 0.0).unwrap(), (0.0, 0.0, 0.5));
        let (_, _, alpha) = relaxed_swap(&s, 0.0, 1.0).unwrap();
        assert!((alpha - 0.731_058_578_630_004_9).abs() < 1e-12);

        let hard = SigmoidSpec::logistic(1e4).unwrap();
        let (mn, mx, alpha) = relaxed_swap(&hard, 1.0, 0.0).unwrap();
        assert!(mn.abs() < 1e-6 && (mx - 1.0).abs() < 1e-6 && alpha.abs() < 1e-6);
        assert!(relaxed_swap(&s, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn two_wire_matrices() {
        let net = SortingNetwork::odd_even(2).unwrap();
        let s = SigmoidSpec::cauchy(3.0).unwrap();
        let r = relaxed_sort(&net, &s, &[0.0, 0.0], true).unwrap();
        assert_eq!(r.sorted_values, vec![0.0, 0.0]);
        assert_eq!(r.perm.unwrap(), Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]));

        let hard = SigmoidSpec::logistic(1e4).unwrap();
        let p = relaxed_sort(&net, &hard, &[1.0, 0.0], true).unwrap().perm.unwrap();
        let swap = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(p.max_abs_diff(&swap) < 1e-3);
    }

    #[test]
    fn length_mismatch() {
        let net = SortingNetwork::odd_even(3).unwrap();
        let s = SigmoidSpec::logistic(1.0).unwrap();
        assert!(relaxed_sort(&net, &s, &[1.0, 2.0], false).is_err());
    }

    #[test]
    fn loss_examples() {
        let q = GroundTruthPermutation::new(vec![2, 0, 1]).unwrap();
        assert_eq!(ranking_ce_loss(&q.to_matrix(), &q).unwrap(), 0.0);
        let half = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let q2 = GroundTruthPermutation::identity(2);
        assert!((ranking_ce_loss(&half, &q2).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(ranking_ce_loss(&half, &q).is_err());
    }

    #[test]
    fn permutation_validation() {
        assert!(GroundTruthPermutation::new(vec![0, 0]).is_err());
        assert!(GroundTruthPermutation::new(vec![0, 2]).is_err());
        let q = GroundTruthPermutation::from_order(&[2, 0, 1]).unwrap();
        assert_eq!(q.ranks(), &[1, 2, 0]);
        assert_eq!(q.order(), vec![2, 0, 1]);
        assert_eq!(GroundTruthPermutation::from_scores(&[0.3, -1.0, 2.0]).ranks(), &[1, 0, 2]);
    }

    #[test]
    fn saturated_gradient_vanishes() {
        let net = SortingNetwork::odd_even(4).unwrap();
        let s = SigmoidSpec::logistic(1e4).unwrap();
        let x = [0.0, 1.0, 2.0, 3.0];
        let g = backward(&net, &s, &x, &GroundTruthPermutation::identity(4)).unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6);
    }

    #[test]
    fn constant_input_gradient_sums_to_zero() {
        let net = SortingNetwork::odd_even(5).unwrap();
        for kind in SigmoidKind::ALL {
            let s = SigmoidSpec::new(kind, 2.0).unwrap();
            let q = GroundTruthPermutation::new(vec![3, 1, 4, 0, 2]).unwrap();
            let g = backward(&net, &s, &[0.7; 5], &q).unwrap();
            let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            assert!(g.iter().sum::<f64>().abs() < 1e-9 * scale, "{kind}");
        }
    }

    #[test]
    fn metrics_examples() {
        let t = vec![GroundTruthPermutation::identity(4); 4];
        let good = vec![vec![0.0, 1.0, 2.0, 3.0]; 4];
        let m = ranking_metrics(&good, &t, false).unwrap();
        assert_eq!((m.em, m.ew), (1.0, 1.0));
        let mut one_off = good.clone();
        one_off[2] = vec![0.0, 2.0, 1.0, 3.0];
        let m = ranking_metrics(&one_off, &t, false).unwrap();
        assert_eq!((m.em, m.ew), (0.75, 0.875));

        let rev = ranking_metrics(&[vec![1.0, 0.0]], &[GroundTruthPermutation::identity(2)], false).unwrap();
        assert_eq!((rev.em, rev.ew), (0.0, 0.0));
        assert!(ranking_metrics(&good, &t, true).is_err());
        assert!(ranking_metrics(&[], &[], false).is_err());
    }

    #[test]
    fn em5_on_groups() {
        let t = vec![GroundTruthPermutation::identity(10)];
        // first group right, second group wrong
        let s = vec![vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 7.0, 9.0]];
        let m = ranking_metrics(&s, &t, true).unwrap();
        assert_eq!(m.em5, Some(0.5));
        assert_eq!(m.em, 0.0);
    }
}
