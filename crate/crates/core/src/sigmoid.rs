//! Sigmoid relaxations of the Heaviside step.
//!
//! Every kind maps `R -> [0, 1]`, is non-decreasing and satisfies
//! `f(x) + f(-x) = 1`. The inverse temperature `beta` scales the input; as
//! `beta -> inf` all kinds converge to the step function.
//!
//! | kind          | f(x)                                   | max f'   |
//! |---------------|----------------------------------------|----------|
//! | `logistic`    | `1 / (1 + exp(-beta x))`               | beta / 4 |
//! | `logistic_art`| `logistic(art(x))`                     | -        |
//! | `reciprocal`  | `beta x / (1 + 2 beta |x|) / 2 + 1/2`  | beta     |
//! | `cauchy`      | `atan(beta x) / pi + 1/2`              | beta / pi|
//! | `optimal`     | piecewise linear / hyperbolic          | beta     |

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

pub const DEFAULT_ART_EPS: f64 = 1e-10;
pub const DEFAULT_ART_LAMBDA: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmoidKind {
    Logistic,
    LogisticArt,
    Reciprocal,
    Cauchy,
    Optimal,
}

impl SigmoidKind {
    pub const ALL: [SigmoidKind; 5] = [
        SigmoidKind::Logistic,
        SigmoidKind::LogisticArt,
        SigmoidKind::Reciprocal,
        SigmoidKind::Cauchy,
        SigmoidKind::Optimal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SigmoidKind::Logistic => "logistic",
            SigmoidKind::LogisticArt => "logistic_art",
            SigmoidKind::Reciprocal => "reciprocal",
            SigmoidKind::Cauchy => "cauchy",
            SigmoidKind::Optimal => "optimal",
        }
    }

    /// Whether the induced conditional swap is monotonic in its inputs.
    pub fn is_monotonic(self) -> bool {
        matches!(
            self,
            SigmoidKind::Reciprocal | SigmoidKind::Cauchy | SigmoidKind::Optimal
        )
    }
}

impl fmt::Display for SigmoidKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SigmoidKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SigmoidKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown sigmoid kind {s:?}")))
    }
}

/// A sigmoid kind together with its inverse temperature.
///
/// `art_lambda` and `art_eps` only affect [`SigmoidKind::LogisticArt`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidSpec {
    pub kind: SigmoidKind,
    pub beta: f64,
    pub art_lambda: f64,
    pub art_eps: f64,
}

impl SigmoidSpec {
    pub fn new(kind: SigmoidKind, beta: f64) -> Result<Self> {
        Self::with_art(kind, beta, DEFAULT_ART_LAMBDA, DEFAULT_ART_EPS)
    }

    pub fn with_art(kind: SigmoidKind, beta: f64, art_lambda: f64, art_eps: f64) -> Result<Self> {
        let spec = SigmoidSpec {
            kind,
            beta,
            art_lambda,
            art_eps,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn logistic(beta: f64) -> Result<Self> {
        Self::new(SigmoidKind::Logistic, beta)
    }

    pub fn cauchy(beta: f64) -> Result<Self> {
        Self::new(SigmoidKind::Cauchy, beta)
    }

    /// The spec whose maximal slope is exactly one.
    pub fn unit_lipschitz(kind: SigmoidKind) -> Result<Self> {
        Self::new(kind, unit_lipschitz_beta(kind)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "beta must be positive and finite, got {}",
                self.beta
            )));
        }
        if !(0.0..=1.0).contains(&self.art_lambda) {
            return Err(Error::InvalidParameter(format!(
                "art_lambda must lie in [0, 1], got {}",
                self.art_lambda
            )));
        }
        if !(self.art_eps.is_finite() && self.art_eps > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "art_eps must be positive, got {}",
                self.art_eps
            )));
        }
        Ok(())
    }

    /// `f(x)`, rejecting non-finite input.
    pub fn eval(&self, x: f64) -> Result<f64> {
        ensure_finite(x, "sigmoid argument")?;
        Ok(self.value(x))
    }

    /// `f'(x)`, rejecting non-finite input.
    pub fn deriv(&self, x: f64) -> Result<f64> {
        ensure_finite(x, "sigmoid argument")?;
        Ok(self.slope(x))
    }

    /// Unchecked `f(x)` for hot loops whose inputs were validated upstream.
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        let b = self.beta;
        match self.kind {
            SigmoidKind::Logistic => logistic(b * x),
            SigmoidKind::LogisticArt => logistic(b * art(x, self.art_lambda, self.art_eps)),
            SigmoidKind::Reciprocal => 0.5 * (2.0 * b * x) / (1.0 + 2.0 * b * x.abs()) + 0.5,
            SigmoidKind::Cauchy => (b * x).atan() / PI + 0.5,
            SigmoidKind::Optimal => {
                let t = b * x;
                if t < -0.25 {
                    -1.0 / (16.0 * t)
                } else if t > 0.25 {
                    1.0 - 1.0 / (16.0 * t)
                } else {
                    t + 0.5
                }
            }
        }
    }

    /// Unchecked `f'(x)`. At the joints of the optimal sigmoid the linear
    /// branch is used, which agrees with the one-sided limits.
    #[inline]
    pub fn slope(&self, x: f64) -> f64 {
        let b = self.beta;
        match self.kind {
            SigmoidKind::Logistic => {
                let s = logistic(b * x);
                b * s * (1.0 - s)
            }
            SigmoidKind::LogisticArt => {
                let (phi, dphi) = art_with_slope(x, self.art_lambda, self.art_eps);
                let s = logistic(b * phi);
                b * s * (1.0 - s) * dphi
            }
            SigmoidKind::Reciprocal => {
                let d = 1.0 + 2.0 * b * x.abs();
                b / (d * d)
            }
            SigmoidKind::Cauchy => {
                let t = b * x;
                b / (PI * (1.0 + t * t))
            }
            SigmoidKind::Optimal => {
                let t = b * x;
                if t.abs() <= 0.25 {
                    b
                } else {
                    b / (16.0 * t * t)
                }
            }
        }
    }

    /// Points where `f'` is continuous but `f''` jumps.
    pub fn kinks(&self) -> Vec<f64> {
        match self.kind {
            SigmoidKind::Optimal => vec![-0.25 / self.beta, 0.25 / self.beta],
            SigmoidKind::Reciprocal => vec![0.0],
            SigmoidKind::LogisticArt if self.art_lambda > 0.0 => vec![0.0],
            _ => Vec::new(),
        }
    }
}

#[inline]
fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Activation replacement `x / (|x|^lambda + eps)`.
///
/// Pushes inputs towards `-1` and `+1` before the logistic sigmoid is
/// applied, keeping the sign of `x`.
#[inline]
pub fn art(x: f64, lambda: f64, eps: f64) -> f64 {
    x / (x.abs().powf(lambda) + eps)
}

/// Checked variant of [`art`].
pub fn art_checked(x: f64, lambda: f64, eps: f64) -> Result<f64> {
    ensure_finite(x, "art argument")?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!(
            "art lambda must lie in [0, 1], got {lambda}"
        )));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "art eps must be positive, got {eps}"
        )));
    }
    Ok(art(x, lambda, eps))
}

#[inline]
fn art_with_slope(x: f64, lambda: f64, eps: f64) -> (f64, f64) {
    let p = x.abs().powf(lambda);
    let d = p + eps;
    (x / d, ((1.0 - lambda) * p + eps) / (d * d))
}

/// The inverse temperature at which `max_x f'(x) = 1`.
pub fn unit_lipschitz_beta(kind: SigmoidKind) -> Result<f64> {
    match kind {
        SigmoidKind::Logistic => Ok(4.0),
        SigmoidKind::Reciprocal => Ok(1.0),
        SigmoidKind::Cauchy => Ok(PI),
        SigmoidKind::Optimal => Ok(1.0),
        SigmoidKind::LogisticArt => Err(Error::InvalidParameter(
            "no unit-Lipschitz normalisation is defined for logistic_art".into(),
        )),
    }
}

/// Relaxed `min(x, 0) = x * f(-x)`, the profile used to judge monotonicity
/// and error bounds of a sigmoid.
#[inline]
pub fn soft_min_with_zero(spec: &SigmoidSpec, x: f64) -> f64 {
    x * spec.value(-x)
}
