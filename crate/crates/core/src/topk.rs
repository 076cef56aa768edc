//! Top-k rows of the relaxed permutation matrix and the top-k
//! classification loss built on them.
//!
//! Only the first `k` rows of `P = P_L ... P_1` matter for top-k learning.
//! After a forward pass that records the swap coefficients, the rows are
//! obtained by starting from the `k x n` slice of the identity and
//! multiplying by the sparse layer factors from the last layer to the first,
//! which costs `O(n k)` per layer instead of `O(n^2)`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffsort::{relaxed_sort, vjp, LOG_FLOOR};
use crate::error::{ensure_all_finite, Error, Result};
use crate::matrix::Matrix;
use crate::network::{NetworkKind, SortingNetwork};
use crate::sigmoid::SigmoidSpec;

/// Distribution `P_K` over `k = 1..=k_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKDistribution {
    probs: Vec<f64>,
}

impl TopKDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidParameter("P_K must not be empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "P_K entries must be non-negative, got {probs:?}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "P_K must sum to 1, sums to {total}"
            )));
        }
        // trailing zeros never contribute
        let last = probs.iter().rposition(|&p| p > 0.0).expect("sums to one");
        let mut probs = probs;
        probs.truncate(last + 1);
        Ok(TopKDistribution { probs })
    }

    pub fn top1() -> Self {
        TopKDistribution { probs: vec![1.0] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `P_K(k)` for 1-based `k`.
    pub fn prob(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.probs.get(k - 1).copied().unwrap_or(0.0)
        }
    }

    /// Largest `k` with positive probability.
    pub fn k_max(&self) -> usize {
        self.probs.len()
    }

    /// Weight of rank `r` (0-based): `sum_{k >= max(r + 1, k_min)} P_K(k)`.
    fn rank_weights(&self, k_min: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.k_max()];
        let mut acc = 0.0;
        for r in (0..self.k_max()).rev() {
            let k = r + 1;
            if k >= k_min {
                acc += self.probs[r];
            }
            w[r] = acc;
        }
        w
    }
}

impl FromStr for TopKDistribution {
    type Err = Error;

    /// Parses a comma-separated list such as `"0.5,0,0,0,0.5"`.
    fn from_str(s: &str) -> Result<Self> {
        let probs = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidParameter(format!("bad P_K entry {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(probs)
    }
}

/// Swap coefficients recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct SwapTrace {
    pub alphas: Vec<Vec<f64>>,
}

impl SwapTrace {
    pub fn record(net: &SortingNetwork, spec: &SigmoidSpec, x: &[f64]) -> Result<Self> {
        Ok(SwapTrace {
            alphas: relaxed_sort(net, spec, x, false)?.alphas,
        })
    }

    /// Multiplies the `k x n` identity slice by the layer factors from the
    /// back. Returns the rows and the number of scalar multiply-adds spent.
    pub fn truncated_product(&self, net: &SortingNetwork, k: usize) -> Result<(Matrix, usize)> {
        let n = net.n();
        if k == 0 || k > n {
            return Err(Error::InvalidParameter(format!(
                "k must lie in 1..={n}, got {k}"
            )));
        }
        let mut rows = Matrix::identity_rows(k, n);
        let mut work = 0;
        for (layer, alphas) in net.layers().iter().zip(&self.alphas).rev() {
            for (c, &alpha) in layer.iter().zip(alphas) {
                for r in 0..k {
                    let (ul, uh) = (rows[(r, c.lo)], rows[(r, c.hi)]);
                    rows[(r, c.lo)] = alpha * ul + (1.0 - alpha) * uh;
                    rows[(r, c.hi)] = (1.0 - alpha) * ul + alpha * uh;
                }
                work += 4 * k;
            }
        }
        Ok((rows, work))
    }
}

/// The first `k` rows of the relaxed permutation matrix of `x`.
pub fn topk_rows(net: &SortingNetwork, spec: &SigmoidSpec, x: &[f64], k: usize) -> Result<Matrix> {
    let trace = SwapTrace::record(net, spec, x)?;
    trace.truncated_product(net, k).map(|(rows, _)| rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKConfig {
    /// Number of highest-scoring classes ranked differentiably.
    pub m: usize,
    /// Replace the top-1 term by softmax cross-entropy.
    pub mixture: bool,
    /// Softmax temperature of the mixture's top-1 term.
    pub temperature: f64,
    pub network: NetworkKind,
    pub sigmoid: SigmoidSpec,
}

impl TopKConfig {
    pub const DEFAULT_M: usize = 16;

    pub fn new(m: usize, sigmoid: SigmoidSpec) -> Self {
        TopKConfig {
            m,
            mixture: false,
            temperature: 1.0,
            network: NetworkKind::OddEven,
            sigmoid,
        }
    }
}

/// Top-k classification loss with a fixed class count, holding the
/// `m`-wire network so repeated calls do not rebuild it.
#[derive(Debug, Clone)]
pub struct TopKLoss {
    config: TopKConfig,
    dist: TopKDistribution,
    classes: usize,
    net: SortingNetwork,
}

/// Loss value together with its gradient over all class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Classes ranked differentiably, in routing order.
    pub subset: Vec<usize>,
}

impl TopKLoss {
    pub fn new(config: TopKConfig, dist: TopKDistribution, classes: usize) -> Result<Self> {
        config.sigmoid.validate()?;
        if !(dist.k_max() <= config.m && config.m <= classes) {
            return Err(Error::InvalidParameter(format!(
                "need k_max <= m <= classes, got {} <= {} <= {classes}",
                dist.k_max(),
                config.m
            )));
        }
        if !(config.temperature.is_finite() && config.temperature > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {}",
                config.temperature
            )));
        }
        let net = SortingNetwork::build(config.network, config.m)?;
        Ok(TopKLoss {
            config,
            dist,
            classes,
            net,
        })
    }

    pub fn config(&self) -> &TopKConfig {
        &self.config
    }

    pub fn distribution(&self) -> &TopKDistribution {
        &self.dist
    }

    /// Indices of the `m` highest scores, with the lowest of them replaced by
    /// `y` when `y` is not among them.
    pub fn route(&self, scores: &[f64], y: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        idx.truncate(self.config.m);
        if !idx.contains(&y) {
            *idx.last_mut().expect("m >= 1") = y;
        }
        idx
    }

    fn check(&self, scores: &[f64], y: usize) -> Result<()> {
        if scores.len() != self.classes {
            return Err(Error::LengthMismatch {
                expected: self.classes,
                got: scores.len(),
            });
        }
        if y >= self.classes {
            return Err(Error::InvalidParameter(format!(
                "class {y} out of range for {} classes",
                self.classes
            )));
        }
        ensure_all_finite(scores, "class scores")
    }

    pub fn loss(&self, scores: &[f64], y: usize) -> Result<f64> {
        self.evaluate(scores, y, false).map(|o| o.loss)
    }

    pub fn loss_and_grad(&self, scores: &[f64], y: usize) -> Result<TopKOutput> {
        self.evaluate(scores, y, true)
    }

    fn evaluate(&self, scores: &[f64], y: usize, with_grad: bool) -> Result<TopKOutput> {
        self.check(scores, y)?;
        let subset = self.route(scores, y);
        let pos = subset.iter().position(|&c| c == y).expect("routed");
        // ascending network on negated scores ranks the largest score first
        let x: Vec<f64> = subset.iter().map(|&c| -scores[c]).collect();
        let k = self.dist.k_max();
        let rows = topk_rows(&self.net, &self.config.sigmoid, &x, k)?;

        let p1 = self.dist.prob(1);
        let (rank_weight, ranking_weight) = if self.config.mixture {
            (self.dist.rank_weights(2), 1.0 - p1)
        } else {
            (self.dist.rank_weights(1), 1.0)
        };

        let mut loss = 0.0;
        let mut grad = vec![0.0; self.classes];
        if ranking_weight > 0.0 {
            let p: f64 = (0..k).map(|r| rank_weight[r] * rows[(r, pos)]).sum();
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::RelaxationCollapse(p));
            }
            loss -= ranking_weight * p.max(LOG_FLOOR).ln();
            if with_grad && p >= LOG_FLOOR {
                let mut gp = Matrix::zeros(k, self.net.n());
                for r in 0..k {
                    gp[(r, pos)] = -ranking_weight * rank_weight[r] / p;
                }
                let gx = vjp(&self.net, &self.config.sigmoid, &x, Some(&gp), None)?;
                for (&c, g) in subset.iter().zip(gx) {
                    grad[c] -= g;
                }
            }
        }
        if self.config.mixture && p1 > 0.0 {
            let t = self.config.temperature;
            let (ce, probs) = softmax_ce(scores, y, t);
            loss += p1 * ce;
            if with_grad {
                for (c, q) in probs.into_iter().enumerate() {
                    let onehot = if c == y { 1.0 } else { 0.0 };
                    grad[c] += p1 * (q - onehot) / t;
                }
            }
        }
        Ok(TopKOutput {
            loss,
            grad,
            subset,
        })
    }
}

/// Softmax cross-entropy of `scores / t` against class `y` and the softmax.
pub fn softmax_ce(scores: &[f64], y: usize, t: f64) -> (f64, Vec<f64>) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / t).exp()).collect();
    let z: f64 = exps.iter().sum();
    let ce = z.ln() - (scores[y] - max) / t;
    (ce, exps.into_iter().map(|e| e / z).collect())
}

/// One-shot form of [`TopKLoss::loss`].
pub fn topk_loss(scores: &[f64], y: usize, dist: &TopKDistribution, config: &TopKConfig) -> Result<f64> {
    TopKLoss::new(config.clone(), dist.clone(), scores.len())?.loss(scores, y)
}

/// One-shot gradient of [`topk_loss`] over all class scores.
pub fn topk_loss_grad(
    scores: &[f64],
    y: usize,
    dist: &TopKDistribution,
    config: &TopKConfig,
) -> Result<Vec<f64>> {
    TopKLoss::new(config.clone(), dist.clone(), scores.len())?
        .loss_and_grad(scores, y)
        .map(|o| o.grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigmoid::SigmoidKind;

    fn cfg(m: usize) -> TopKConfig {
        TopKConfig::new(m, SigmoidSpec::new(SigmoidKind::Cauchy, 5.0).unwrap())
    }

    #[test]
    fn distribution_parsing() {
        let d: TopKDistribution = "0.5,0,0,0,0.5".parse().unwrap();
        assert_eq!(d.k_max(), 5);
        assert_eq!(d.prob(1), 0.5);
        assert_eq!(d.prob(6), 0.0);
        let d: TopKDistribution = "1,0,0".parse().unwrap();
        assert_eq!(d.k_max(), 1);
        assert!("0.5,0.2".parse::<TopKDistribution>().is_err());
        assert!("0.5,x".parse::<TopKDistribution>().is_err());
        assert!("1.5,-0.5".parse::<TopKDistribution>().is_err());
    }

    #[test]
    fn rank_weights_are_cumulative() {
        let d = TopKDistribution::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(d.rank_weights(1), vec![1.0, 0.5]);
        assert_eq!(d.rank_weights(2), vec![0.5, 0.5]);
    }

    #[test]
    fn k_out_of_range() {
        let net = SortingNetwork::odd_even(4).unwrap();
        let s = SigmoidSpec::logistic(1.0).unwrap();
        assert!(topk_rows(&net, &s, &[1.0, 2.0, 3.0, 4.0], 0).is_err());
        assert!(topk_rows(&net, &s, &[1.0, 2.0, 3.0, 4.0], 5).is_err());
    }

    #[test]
    fn hard_limit_selects_minimum() {
        let net = SortingNetwork::bitonic(8).unwrap();
        let s = SigmoidSpec::logistic(1e4).unwrap();
        let x = [3.0, 1.0, 4.0, -1.5, 5.0, 9.0, 2.0, 6.0];
        let rows = topk_rows(&net, &s, &x, 1).unwrap();
        for (c, v) in rows.row(0).iter().enumerate() {
            let expect = if c == 3 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn routing_substitutes_true_class() {
        let loss = TopKLoss::new(cfg(3), TopKDistribution::top1(), 6).unwrap();
        let scores = [0.1, 0.9, 0.5, 0.7, -1.0, 0.0];
        assert_eq!(loss.route(&scores, 2), vec![1, 3, 2]);
        assert_eq!(loss.route(&scores, 4), vec![1, 3, 4]);
    }

    #[test]
    fn grad_is_zero_outside_subset() {
        let d = TopKDistribution::new(vec![0.5, 0.5]).unwrap();
        let loss = TopKLoss::new(cfg(4), d, 8).unwrap();
        let scores = [0.3, -0.2, 1.4, 0.8, -1.0, 0.1, 2.0, -0.5];
        let out = loss.loss_and_grad(&scores, 5).unwrap();
        for c in 0..8 {
            if !out.subset.contains(&c) {
                assert_eq!(out.grad[c], 0.0);
            }
        }
        assert!(out.grad.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn perfect_ranking_has_zero_loss() {
        let s = SigmoidSpec::logistic(1e6).unwrap();
        let loss = TopKLoss::new(TopKConfig::new(4, s), TopKDistribution::top1(), 4).unwrap();
        assert_eq!(loss.loss(&[5.0, 1.0, 2.0, 3.0], 0).unwrap(), 0.0);
    }

    #[test]
    fn invalid_configs() {
        let d = TopKDistribution::new(vec![0.0, 0.0, 1.0]).unwrap();
        assert!(TopKLoss::new(cfg(2), d.clone(), 10).is_err());
        assert!(TopKLoss::new(cfg(12), d, 10).is_err());
        let loss = TopKLoss::new(cfg(4), TopKDistribution::top1(), 5).unwrap();
        assert!(loss.loss(&[0.0; 4], 0).is_err());
        assert!(loss.loss(&[0.0; 5], 5).is_err());
    }

    #[test]
    fn collapse_is_reported() {
        // saturated swaps leave exactly zero mass on class 0 at rank 1
        let s = SigmoidSpec::logistic(1e6).unwrap();
        let loss = TopKLoss::new(TopKConfig::new(4, s), TopKDistribution::top1(), 4).unwrap();
        let err = loss.loss(&[0.0, 100.0, 200.0, 300.0], 0).unwrap_err();
        assert!(matches!(err, Error::RelaxationCollapse(_)));
    }
}
