//! Finite-difference checks of the analytic gradients.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::diffsort::{comparator_arguments, loss_and_grad, ranking_ce_loss, relaxed_sort, GroundTruthPermutation};
use crate::error::Result;
use crate::model::Mlp;
use crate::network::{NetworkKind, SortingNetwork};
use crate::sigmoid::{SigmoidKind, SigmoidSpec};
use crate::topk::{TopKConfig, TopKDistribution, TopKLoss};

pub const DEFAULT_STEP: f64 = 1e-4;

/// Entries of `P` closer than this to 0 or 1 make `ln(1 - p)` too poorly
/// conditioned for a finite-difference reference.
pub const SATURATION: f64 = 1e-6;

/// Draws rejected per requested case before a check gives up early.
const MAX_SKIPS_PER_CASE: usize = 1000;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub module: &'static str,
    pub cases: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl GradcheckReport {
    fn new(module: &'static str) -> Self {
        GradcheckReport {
            module,
            cases: 0,
            skipped: 0,
            max_rel_err: 0.0,
        }
    }

    fn record(&mut self, err: f64) {
        self.cases += 1;
        self.max_rel_err = self.max_rel_err.max(err);
    }
}

pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Fourth-order central differences, `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
///
/// The two-point rule has truncation error near `(beta h)^2 / 6` relative
/// to the slope, which at the inverse temperatures used for training is
/// larger than the tolerances checked here.
pub fn central_difference_4<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut at = |t: f64| -> Result<f64> {
            probe[i] = x[i] + t;
            f(&probe)
        };
        let d1 = at(h)? - at(-h)?;
        let d2 = at(2.0 * h)? - at(-2.0 * h)?;
        probe[i] = x[i];
        out.push((8.0 * d1 - d2) / (12.0 * h));
    }
    Ok(out)
}

/// `max |a - b|` over the larger max-norm of the two, floored at `1e-6`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / norm(analytic).max(norm(numeric)).max(1e-6)
}

/// Distance below which a comparator argument counts as sitting on a kink
/// of `f`, for central differences with step `h`.
fn kink_margin(spec: &SigmoidSpec, h: f64) -> f64 {
    match spec.kind {
        SigmoidKind::LogisticArt => 500.0 * h,
        _ => 10.0 * h,
    }
}

/// Whether any comparator of the relaxed execution of `x` is close enough
/// to a kink of `f` that finite differences are unreliable.
pub fn near_kink(net: &SortingNetwork, spec: &SigmoidSpec, x: &[f64], h: f64) -> Result<bool> {
    let kinks = spec.kinks();
    if kinks.is_empty() {
        return Ok(false);
    }
    let margin = kink_margin(spec, h);
    Ok(comparator_arguments(net, spec, x)?
        .iter()
        .flatten()
        .any(|d| kinks.iter().any(|k| (d - k).abs() < margin)))
}

fn random_perm<R: Rng + ?Sized>(rng: &mut R, n: usize) -> GroundTruthPermutation {
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    GroundTruthPermutation::new(ranks).expect("shuffled identity")
}

/// Ranking loss gradient through the relaxed network.
pub fn check_diffsort<R: Rng + ?Sized>(
    rng: &mut R,
    kind: NetworkKind,
    n: usize,
    spec: &SigmoidSpec,
    cases: usize,
) -> Result<GradcheckReport> {
    let net = SortingNetwork::build(kind, n)?;
    let h = DEFAULT_STEP;
    let mut report = GradcheckReport::new("diffsort.backward");
    // keep comparator arguments in the informative range of f
    let spread = (8.0 / spec.beta).min(1.0);
    while report.cases < cases && report.skipped < MAX_SKIPS_PER_CASE * cases {
        let x: Vec<f64> = (0..n).map(|_| spread * rng.random_range(-1.0..1.0)).collect();
        if near_kink(&net, spec, &x, h)? {
            report.skipped += 1;
            continue;
        }
        let p = relaxed_sort(&net, spec, &x, true)?.perm.expect("materialised");
        if p.as_slice().iter().any(|v| v.min(1.0 - v) < SATURATION) {
            report.skipped += 1;
            continue;
        }
        let q = random_perm(rng, n);
        let (_, g) = loss_and_grad(&net, spec, &x, &q)?;
        let fd = central_difference_4(
            |z| {
                let p = relaxed_sort(&net, spec, z, true)?.perm.expect("materialised");
                ranking_ce_loss(&p, &q)
            },
            &x,
            h,
        )?;
        report.record(relative_error(&g, &fd));
    }
    Ok(report)
}

/// Top-k loss gradient over the class scores, with `m = classes` so that
/// routing cannot change under the probe.
pub fn check_topk<R: Rng + ?Sized>(
    rng: &mut R,
    classes: usize,
    spec: &SigmoidSpec,
    cases: usize,
) -> Result<GradcheckReport> {
    let h = DEFAULT_STEP;
    let net = SortingNetwork::odd_even(classes)?;
    let mut report = GradcheckReport::new("topk_loss_grad");
    let spread = (8.0 / spec.beta).min(1.0);
    while report.cases < cases && report.skipped < MAX_SKIPS_PER_CASE * cases {
        let k_max = rng.random_range(1..=classes.min(5));
        let mut probs: Vec<f64> = (0..k_max).map(|_| rng.random_range(0.0..1.0)).collect();
        probs[k_max - 1] += 0.1;
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        let dist = TopKDistribution::new(probs)?;
        let mut config = TopKConfig::new(classes, *spec);
        config.mixture = rng.random_bool(0.5);
        let loss = TopKLoss::new(config, dist, classes)?;

        let scores: Vec<f64> = (0..classes).map(|_| spread * rng.random_range(-1.0..1.0)).collect();
        let y = rng.random_range(0..classes);
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let tight = sorted.windows(2).any(|w| w[1] - w[0] < 10.0 * h);
        let routed: Vec<f64> = loss.route(&scores, y).iter().map(|&c| -scores[c]).collect();
        if tight || near_kink(&net, spec, &routed, h)? {
            report.skipped += 1;
            continue;
        }
        let out = loss.loss_and_grad(&scores, y)?;
        let fd = central_difference_4(|s| loss.loss(s, y), &scores, h)?;
        report.record(relative_error(&out.grad, &fd));
    }
    Ok(report)
}

/// Parameter gradient of a random linear functional of the MLP output.
pub fn check_model<R: Rng + ?Sized>(rng: &mut R, dims: &[usize], cases: usize) -> Result<GradcheckReport> {
    let h = DEFAULT_STEP;
    let mut report = GradcheckReport::new("model.backward");
    while report.cases < cases && report.skipped < MAX_SKIPS_PER_CASE * cases {
        let mut model = Mlp::init(dims, rng.random())?;
        for b in model.params_mut().iter_mut() {
            // non-zero biases keep hidden units off the ReLU kink
            if *b == 0.0 {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        let batch = 3;
        let x: Vec<f64> = (0..batch * model.input_dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let c: Vec<f64> = (0..batch * model.output_dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let (_, cache) = model.forward(&x)?;
        let hidden = &cache.pre_activations()[..model.num_layers() - 1];
        if hidden.iter().flatten().any(|z| z.abs() < 1e-2) {
            report.skipped += 1;
            continue;
        }
        let grads = model.backward(&cache, &c)?;
        let theta = model.params().to_vec();
        let fd = central_difference_4(
            |p| {
                let m = Mlp::from_params(dims, p.to_vec())?;
                let y = m.predict(&x)?;
                Ok(y.iter().zip(&c).map(|(a, b)| a * b).sum())
            },
            &theta,
            h,
        )?;
        report.record(relative_error(&grads.params, &fd));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn central_difference_of_cubic() {
        let g = central_difference(|x| Ok(x[0].powi(3) + 2.0 * x[1]), &[1.0, 5.0], 1e-4).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-7);
        assert!((g[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn fourth_order_is_exact_on_quartics() {
        let g = central_difference_4(|x| Ok(x[0].powi(4)), &[1.5], 1e-2).unwrap();
        assert!((g[0] - 4.0 * 1.5f64.powi(3)).abs() < 1e-9);
    }

    #[test]
    fn relative_error_scale() {
        assert_eq!(relative_error(&[2.0, 0.0], &[2.0, 0.0]), 0.0);
        assert!((relative_error(&[2.0, 1.0], &[2.0, 1.1]) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn small_checks_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = SigmoidSpec::cauchy(5.0).unwrap();
        let r = check_diffsort(&mut rng, NetworkKind::OddEven, 4, &spec, 5).unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
        let r = check_topk(&mut rng, 5, &spec, 5).unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
        let r = check_model(&mut rng, &[3, 5, 2], 3).unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }
}
