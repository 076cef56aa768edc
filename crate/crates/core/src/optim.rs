//! Split optimization at the model/loss boundary.
//!
//! Training `l(f(x; theta))` is split into a step on the model output
//! `z* <- step(y)` followed by a regression step on
//! `1/2 ||z* - f(x; theta)||^2`. The surrogate gradient handed to the model is
//! always `y - z*`. This module provides:
//!
//! * Newton targets `z* = y - (H + damping I)^-1 grad`, with `H` an
//!   element-wise Hessian, a batch-averaged Hessian or the empirical Fisher;
//! * RESGRO targets, chosen by sampling perturbations of `y`, with exact
//!   bootstrap rank weights when the pool is larger than the subset size;
//! * plain first-order optimizers for the model parameters.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffsort::GroundTruthPermutation;
use crate::error::{ensure_all_finite, Error, Result};
use crate::matrix::Matrix;
use crate::model::Mlp;

pub const DEFAULT_DAMPING: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureKind {
    ElementwiseHessian,
    EmpiricalHessian,
    EmpiricalFisher,
}

impl FromStr for CurvatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elementwise_hessian" | "hessian_elementwise" => Ok(CurvatureKind::ElementwiseHessian),
            "hessian" | "empirical_hessian" => Ok(CurvatureKind::EmpiricalHessian),
            "fisher" | "empirical_fisher" => Ok(CurvatureKind::EmpiricalFisher),
            _ => Err(Error::InvalidParameter(format!("unknown curvature {s:?}"))),
        }
    }
}

impl fmt::Display for CurvatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurvatureKind::ElementwiseHessian => "elementwise_hessian",
            CurvatureKind::EmpiricalHessian => "hessian",
            CurvatureKind::EmpiricalFisher => "fisher",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `1/2 ||y - t||^2`
    Mse,
    /// Softmax cross-entropy of logits `y` against distribution `p`.
    Smce,
    /// Binary cross-entropy of probabilities `y` against `p`.
    Bce,
    /// Binary cross-entropy of `sigmoid(y)` against `p`.
    Sbce,
    /// Caller-supplied gradient and curvature.
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonLossSpec {
    pub curvature: CurvatureKind,
    pub damping: f64,
    pub loss_kind: LossKind,
}

impl NewtonLossSpec {
    pub fn new(curvature: CurvatureKind, loss_kind: LossKind) -> Self {
        NewtonLossSpec {
            curvature,
            damping: DEFAULT_DAMPING,
            loss_kind,
        }
    }

    pub fn with_damping(mut self, damping: f64) -> Self {
        self.damping = damping;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.damping.is_finite() && self.damping >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "damping must be non-negative, got {}",
                self.damping
            )));
        }
        Ok(())
    }
}

/// Curvature of a loss at one output, either diagonal or dense.
#[derive(Debug, Clone, PartialEq)]
pub enum CurvatureMatrix {
    Diagonal(Vec<f64>),
    Dense(Matrix),
}

impl CurvatureMatrix {
    pub fn dim(&self) -> usize {
        match self {
            CurvatureMatrix::Diagonal(d) => d.len(),
            CurvatureMatrix::Dense(m) => m.rows(),
        }
    }

    pub fn to_dense(&self) -> Matrix {
        match self {
            CurvatureMatrix::Dense(m) => m.clone(),
            CurvatureMatrix::Diagonal(d) => {
                let mut m = Matrix::zeros(d.len(), d.len());
                for (i, v) in d.iter().enumerate() {
                    m[(i, i)] = *v;
                }
                m
            }
        }
    }

    /// `g g^T`.
    pub fn outer(g: &[f64]) -> Self {
        let n = g.len();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = g[i] * g[j];
            }
        }
        CurvatureMatrix::Dense(m)
    }

    /// Element-wise mean of several curvatures of equal dimension.
    pub fn mean(items: &[CurvatureMatrix]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidParameter("empty batch".into()))?;
        let n = first.dim();
        if items.iter().any(|c| c.dim() != n) {
            return Err(Error::ShapeMismatch("curvatures of different size".into()));
        }
        let k = items.len() as f64;
        if items.iter().all(|c| matches!(c, CurvatureMatrix::Diagonal(_))) {
            let mut d = vec![0.0; n];
            for c in items {
                if let CurvatureMatrix::Diagonal(v) = c {
                    d.iter_mut().zip(v).for_each(|(a, b)| *a += b / k);
                }
            }
            return Ok(CurvatureMatrix::Diagonal(d));
        }
        let mut m = Matrix::zeros(n, n);
        for c in items {
            let dense = c.to_dense();
            for i in 0..n {
                for j in 0..n {
                    m[(i, j)] += dense[(i, j)] / k;
                }
            }
        }
        Ok(CurvatureMatrix::Dense(m))
    }
}

/// The damped Newton step `(H + damping I)^-1 grad`.
pub fn newton_step(grad: &[f64], curvature: &CurvatureMatrix, damping: f64) -> Result<Vec<f64>> {
    if curvature.dim() != grad.len() {
        return Err(Error::LengthMismatch {
            expected: curvature.dim(),
            got: grad.len(),
        });
    }
    ensure_all_finite(grad, "gradient")?;
    match curvature {
        CurvatureMatrix::Diagonal(d) => d
            .iter()
            .zip(grad)
            .map(|(h, g)| {
                let a = h + damping;
                if a.abs() <= f64::EPSILON * h.abs().max(1.0) || !a.is_finite() {
                    Err(Error::Singular)
                } else {
                    Ok(g / a)
                }
            })
            .collect(),
        CurvatureMatrix::Dense(m) => {
            let n = grad.len();
            let mut a = DMatrix::from_row_slice(n, n, m.as_slice());
            for i in 0..n {
                a[(i, i)] += damping;
            }
            let lu = a.full_piv_lu();
            let u_diag = lu.u().diagonal();
            let max = u_diag.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            let min = u_diag.iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
            if !(max > 0.0 && min / max > 1e-12) {
                return Err(Error::Singular);
            }
            let x = lu
                .solve(&DVector::from_column_slice(grad))
                .ok_or(Error::Singular)?;
            Ok(x.iter().copied().collect())
        }
    }
}

/// `z* = y - (H + damping I)^-1 grad`.
pub fn newton_target(y: &[f64], grad: &[f64], curvature: &CurvatureMatrix, damping: f64) -> Result<Vec<f64>> {
    if y.len() != grad.len() {
        return Err(Error::LengthMismatch {
            expected: y.len(),
            got: grad.len(),
        });
    }
    let step = newton_step(grad, curvature, damping)?;
    Ok(y.iter().zip(step).map(|(a, s)| a - s).collect())
}

/// Gradient and curvature of a loss evaluated per sample of a batch.
pub trait SecondOrderLoss {
    fn gradient(&self, sample: usize, y: &[f64]) -> Result<Vec<f64>>;
    fn hessian(&self, sample: usize, y: &[f64]) -> Result<CurvatureMatrix>;
}

/// Closed-form losses with one target vector per sample.
#[derive(Debug, Clone)]
pub struct StandardLoss {
    pub kind: LossKind,
    pub targets: Vec<Vec<f64>>,
}

impl StandardLoss {
    pub fn new(kind: LossKind, targets: Vec<Vec<f64>>) -> Result<Self> {
        if kind == LossKind::Custom {
            return Err(Error::InvalidParameter(
                "custom losses need caller-supplied gradient and curvature".into(),
            ));
        }
        Ok(StandardLoss { kind, targets })
    }

    fn target(&self, sample: usize, y: &[f64]) -> Result<&[f64]> {
        let p = self
            .targets
            .get(sample)
            .ok_or_else(|| Error::InvalidParameter(format!("no target for sample {sample}")))?;
        if p.len() != y.len() {
            return Err(Error::LengthMismatch {
                expected: p.len(),
                got: y.len(),
            });
        }
        Ok(p)
    }

    pub fn value(&self, sample: usize, y: &[f64]) -> Result<f64> {
        let p = self.target(sample, y)?;
        Ok(match self.kind {
            LossKind::Mse => 0.5 * y.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            LossKind::Smce => {
                let q = softmax(y);
                -p.iter().zip(&q).map(|(pi, qi)| pi * qi.ln()).sum::<f64>()
            }
            LossKind::Bce => bce(y, p),
            LossKind::Sbce => bce(&y.iter().map(|v| logistic(*v)).collect::<Vec<_>>(), p),
            LossKind::Custom => unreachable!("rejected in new"),
        })
    }
}

impl SecondOrderLoss for StandardLoss {
    fn gradient(&self, sample: usize, y: &[f64]) -> Result<Vec<f64>> {
        let p = self.target(sample, y)?;
        Ok(match self.kind {
            LossKind::Mse => y.iter().zip(p).map(|(a, b)| a - b).collect(),
            LossKind::Smce => softmax(y).iter().zip(p).map(|(q, p)| q - p).collect(),
            LossKind::Bce => y
                .iter()
                .zip(p)
                .map(|(y, p)| -p / y + (1.0 - p) / (1.0 - y))
                .collect(),
            LossKind::Sbce => y.iter().zip(p).map(|(y, p)| logistic(*y) - p).collect(),
            LossKind::Custom => unreachable!("rejected in new"),
        })
    }

    fn hessian(&self, sample: usize, y: &[f64]) -> Result<CurvatureMatrix> {
        let p = self.target(sample, y)?;
        Ok(match self.kind {
            LossKind::Mse => CurvatureMatrix::Diagonal(vec![1.0; y.len()]),
            LossKind::Smce => {
                let q = softmax(y);
                let n = q.len();
                let mut m = Matrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        m[(i, j)] = if i == j { q[i] } else { 0.0 } - q[i] * q[j];
                    }
                }
                CurvatureMatrix::Dense(m)
            }
            LossKind::Bce => CurvatureMatrix::Diagonal(
                y.iter()
                    .zip(p)
                    .map(|(y, p)| p / (y * y) + (1.0 - p) / ((1.0 - y) * (1.0 - y)))
                    .collect(),
            ),
            LossKind::Sbce => CurvatureMatrix::Diagonal(
                y.iter()
                    .map(|v| {
                        let s = logistic(*v);
                        s - s * s
                    })
                    .collect(),
            ),
            LossKind::Custom => unreachable!("rejected in new"),
        })
    }
}

fn bce(y: &[f64], p: &[f64]) -> f64 {
    -y.iter()
        .zip(p)
        .map(|(y, p)| p * y.ln() + (1.0 - p) * (1.0 - y).ln())
        .sum::<f64>()
}

pub fn softmax(y: &[f64]) -> Vec<f64> {
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = y.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Surrogate gradients `y_i - z*_i` for a batch of outputs under a
/// closed-form loss.
pub fn newton_loss_grad(spec: &NewtonLossSpec, ys: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if spec.loss_kind == LossKind::Custom {
        return Err(Error::InvalidParameter(
            "custom losses go through newton_loss_grad_with".into(),
        ));
    }
    if ys.len() != targets.len() {
        return Err(Error::LengthMismatch {
            expected: ys.len(),
            got: targets.len(),
        });
    }
    let loss = StandardLoss::new(spec.loss_kind, targets.to_vec())?;
    newton_loss_grad_with(spec, ys, &loss)
}

/// Surrogate gradients for any [`SecondOrderLoss`].
pub fn newton_loss_grad_with(
    spec: &NewtonLossSpec,
    ys: &[Vec<f64>],
    loss: &dyn SecondOrderLoss,
) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    if ys.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let grads = ys
        .iter()
        .enumerate()
        .map(|(i, y)| loss.gradient(i, y))
        .collect::<Result<Vec<_>>>()?;
    match spec.curvature {
        CurvatureKind::ElementwiseHessian => ys
            .iter()
            .enumerate()
            .map(|(i, y)| newton_step(&grads[i], &loss.hessian(i, y)?, spec.damping))
            .collect(),
        CurvatureKind::EmpiricalHessian => {
            let hs = ys
                .iter()
                .enumerate()
                .map(|(i, y)| loss.hessian(i, y))
                .collect::<Result<Vec<_>>>()?;
            let h = CurvatureMatrix::mean(&hs)?;
            grads.iter().map(|g| newton_step(g, &h, spec.damping)).collect()
        }
        CurvatureKind::EmpiricalFisher => {
            let fs: Vec<CurvatureMatrix> = grads.iter().map(|g| CurvatureMatrix::outer(g)).collect();
            let f = CurvatureMatrix::mean(&fs)?;
            grads.iter().map(|g| newton_step(g, &f, spec.damping)).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Cauchy,
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "normal" => Ok(NoiseKind::Gaussian),
            "cauchy" => Ok(NoiseKind::Cauchy),
            _ => Err(Error::InvalidParameter(format!("unknown noise kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResgroSpec {
    /// Subset size `K`.
    pub num_samples: usize,
    /// Pool size `M >= K`; bootstrapped when `M > K`.
    pub pool_size: usize,
    pub noise_scale: f64,
    pub noise: NoiseKind,
}

impl ResgroSpec {
    pub fn new(num_samples: usize, pool_size: usize, noise_scale: f64, noise: NoiseKind) -> Result<Self> {
        let spec = ResgroSpec {
            num_samples,
            pool_size,
            noise_scale,
            noise,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::InvalidParameter("RESGRO needs K >= 1".into()));
        }
        if self.num_samples > self.pool_size {
            return Err(Error::InvalidParameter(format!(
                "RESGRO subset size K = {} exceeds pool size M = {}",
                self.num_samples, self.pool_size
            )));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise scale must be positive, got {}",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

/// Probability that the `r`-th best of `m` pool members (0-based) is the
/// best of a uniformly drawn `k`-subset: `C(m - r - 1, k - 1) / C(m, k)`.
pub fn bootstrap_weights(m: usize, k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > m {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= K <= M, got K = {k}, M = {m}"
        )));
    }
    let mut w = vec![0.0; m];
    w[0] = k as f64 / m as f64;
    for r in 1..=m - k {
        // ratio of consecutive binomials C(m-r-1, k-1) / C(m-r, k-1)
        w[r] = w[r - 1] * (m - r + 1 - k) as f64 / (m - r) as f64;
    }
    Ok(w)
}

/// RESGRO target from given perturbations: the pool is ranked by loss and
/// averaged with the bootstrap weights of `k`-subsets.
pub fn resgro_target_from<F>(y: &[f64], loss_fn: F, perturbations: &[Vec<f64>], k: usize) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let weights = bootstrap_weights(perturbations.len(), k)?;
    let mut scored = Vec::with_capacity(perturbations.len());
    for (i, eps) in perturbations.iter().enumerate() {
        if eps.len() != y.len() {
            return Err(Error::LengthMismatch {
                expected: y.len(),
                got: eps.len(),
            });
        }
        let z: Vec<f64> = y.iter().zip(eps).map(|(a, e)| a + e).collect();
        scored.push((loss_fn(&z), i));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut z = y.to_vec();
    for ((_, i), w) in scored.iter().zip(&weights) {
        if *w == 0.0 {
            continue;
        }
        for (zj, e) in z.iter_mut().zip(&perturbations[*i]) {
            *zj += w * e;
        }
    }
    Ok(z)
}

/// Draws `M` perturbations of `y` and returns the (bootstrapped) RESGRO
/// target. `loss_fn` need not be differentiable.
pub fn resgro_target<F, R>(y: &[f64], loss_fn: F, spec: &ResgroSpec, rng: &mut R) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    spec.validate()?;
    ensure_all_finite(y, "RESGRO input")?;
    let perturbations: Vec<Vec<f64>> = (0..spec.pool_size)
        .map(|_| {
            (0..y.len())
                .map(|_| spec.noise_scale * sample_noise(spec.noise, rng))
                .collect()
        })
        .collect();
    resgro_target_from(y, loss_fn, &perturbations, spec.num_samples)
}

fn sample_noise<R: Rng + ?Sized>(kind: NoiseKind, rng: &mut R) -> f64 {
    match kind {
        NoiseKind::Gaussian => StandardNormal.sample(rng),
        NoiseKind::Cauchy => Cauchy::new(0.0, 1.0).expect("unit scale").sample(rng),
    }
}

/// Gradient step on `l(f(x; theta))` taken as a unit step on the outputs
/// followed by a step of size `lr` on `1/2 ||z* - f(x; theta)||^2`.
pub fn two_stage_gd_step<G>(model: &mut Mlp, x: &[f64], loss_grad: G, lr: f64) -> Result<()>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    let (y, cache) = model.forward(x)?;
    let g = loss_grad(&y);
    let z_star: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - b).collect();
    let residual: Vec<f64> = y.iter().zip(&z_star).map(|(a, z)| a - z).collect();
    let grads = model.backward(&cache, &residual)?;
    for (p, gp) in model.params_mut().iter_mut().zip(&grads.params) {
        *p -= lr * gp;
    }
    Ok(())
}

/// Plain gradient step on `l(f(x; theta))`.
pub fn direct_gd_step<G>(model: &mut Mlp, x: &[f64], loss_grad: G, lr: f64) -> Result<()>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    let (y, cache) = model.forward(x)?;
    let grads = model.backward(&cache, &loss_grad(&y))?;
    for (p, gp) in model.params_mut().iter_mut().zip(&grads.params) {
        *p -= lr * gp;
    }
    Ok(())
}

/// Scalar model `f(theta)` with its first two derivatives at `theta`.
#[derive(Debug, Clone, Copy)]
pub struct ScalarJet {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Split Newton step for a scalar parameter and scalar output: a unit Newton
/// step on the output (`dl`, `d2l` evaluated at `f(theta)`) followed by a
/// Newton step of size `lr` on `1/2 (z* - f(theta))^2`.
pub fn split_newton_step_1d(theta: f64, f: ScalarJet, dl: f64, d2l: f64, lr: f64) -> Result<f64> {
    if d2l == 0.0 {
        return Err(Error::Singular);
    }
    let z_star = f.value - dl / d2l;
    let r = f.value - z_star;
    let curv = f.d2 * r + f.d1 * f.d1;
    if curv == 0.0 {
        return Err(Error::Singular);
    }
    Ok(theta - lr * f.d1 * r / curv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdaptiveMoments,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" | "adaptive_moments" => Ok(OptimizerKind::AdaptiveMoments),
            _ => Err(Error::InvalidParameter(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(OptimizerState {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: Vec::new(),
            second: Vec::new(),
            t: 0,
        })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::AdaptiveMoments, lr)
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::LengthMismatch {
                expected: params.len(),
                got: grads.len(),
            });
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::AdaptiveMoments => {
                if self.first.len() != params.len() {
                    if self.t > 1 {
                        return Err(Error::ShapeMismatch(
                            "parameter count changed between steps".into(),
                        ));
                    }
                    self.first = vec![0.0; params.len()];
                    self.second = vec![0.0; params.len()];
                }
                let c1 = 1.0 - self.beta1.powi(self.t as i32);
                let c2 = 1.0 - self.beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.first[i] = self.beta1 * self.first[i] + (1.0 - self.beta1) * g;
                    self.second[i] = self.beta2 * self.second[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = self.first[i] / c1;
                    let v_hat = self.second[i] / c2;
                    params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

/// Kendall's tau between predicted scores and a ground-truth ranking.
/// Pairs tied in the prediction count as neither concordant nor discordant.
pub fn kendall_tau(pred: &[f64], truth: &GroundTruthPermutation) -> Result<f64> {
    let n = pred.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "Kendall's tau needs at least 2 elements, got {n}"
        )));
    }
    if truth.len() != n {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: n,
        });
    }
    let ranks = truth.ranks();
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let a = pred[i].partial_cmp(&pred[j]).map_or(0, |o| o as i64);
            let b = ranks[i].cmp(&ranks[j]) as i64;
            score += a * b;
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}
