//! Loss oracles for linear predictors, with declared analytic constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecops::{dot, norm};

/// A labelled observation `z = (w, y)` with `y` in {-1, +1}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: Vec<f64>,
    pub label: f64,
}

impl Observation {
    pub fn new(features: Vec<f64>, label: f64) -> Self {
        Observation { features, label }
    }

    /// `y <x, w>`
    #[inline]
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.label * dot(x, &self.features)
    }
}

/// Declared constants of a loss on its supported data domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConstants {
    /// `L`: bound on the (sub)gradient norm.
    pub lipschitz: f64,
    /// `beta`: Lipschitz constant of the gradient.
    pub smoothness: Option<f64>,
    /// `gamma`
    pub strong_convexity: Option<f64>,
    /// `B >= l(0, z)`
    pub upper_at_zero: f64,
    /// `C <= l(x, z)`
    pub lower_bound: f64,
    /// `D`, the Rademacher constant of the loss class.
    pub rademacher: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Loss {
    /// `log(1 + exp(-y <x, w>))` for features with `‖w‖ <= feature_bound`.
    Logistic { feature_bound: f64 },
    /// `max(0, 1 - y <x, w>)`.
    Hinge { feature_bound: f64 },
    /// `base(x, z) + (gamma/2)‖x‖²`, with constants valid on the ball of `radius`.
    Tikhonov { base: Box<Loss>, gamma: f64, radius: f64 },
}

/// `log(1 + exp(-a))` without overflow.
#[inline]
fn softplus_neg(a: f64) -> f64 {
    if a > 0.0 {
        (-a).exp().ln_1p()
    } else {
        -a + a.exp().ln_1p()
    }
}

/// `1 / (1 + exp(a))`, the logistic function at `-a`.
#[inline]
fn sigmoid_neg(a: f64) -> f64 {
    if a >= 0.0 {
        let e = (-a).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + a.exp())
    }
}

impl Loss {
    pub fn logistic() -> Loss {
        Loss::Logistic { feature_bound: 1.0 }
    }

    pub fn hinge() -> Loss {
        Loss::Hinge { feature_bound: 1.0 }
    }

    pub fn tikhonov(base: Loss, gamma: f64, radius: f64) -> Result<Loss> {
        if !(gamma > 0.0) {
            return Err(Error::param(format!("Tikhonov gamma must be > 0, got {gamma}")));
        }
        if !(radius > 0.0) {
            return Err(Error::param(format!("Tikhonov radius must be > 0, got {radius}")));
        }
        Ok(Loss::Tikhonov { base: Box::new(base), gamma, radius })
    }

    pub fn value(&self, x: &[f64], z: &Observation) -> f64 {
        match self {
            Loss::Logistic { .. } => softplus_neg(z.margin(x)),
            Loss::Hinge { .. } => (1.0 - z.margin(x)).max(0.0),
            Loss::Tikhonov { base, gamma, .. } => base.value(x, z) + 0.5 * gamma * dot(x, x),
        }
    }

    /// Writes an element of the subdifferential into `out`.
    pub fn subgradient_into(&self, x: &[f64], z: &Observation, out: &mut [f64]) {
        match self {
            Loss::Logistic { .. } => {
                let coef = -z.label * sigmoid_neg(z.margin(x));
                out.iter_mut().zip(&z.features).for_each(|(o, w)| *o = coef * w);
            }
            Loss::Hinge { .. } => {
                // Zero at the kink (margin exactly 1).
                if z.margin(x) < 1.0 {
                    out.iter_mut().zip(&z.features).for_each(|(o, w)| *o = -z.label * w);
                } else {
                    out.iter_mut().for_each(|o| *o = 0.0);
                }
            }
            Loss::Tikhonov { base, gamma, .. } => {
                base.subgradient_into(x, z, out);
                out.iter_mut().zip(x).for_each(|(o, xi)| *o += gamma * xi);
            }
        }
    }

    pub fn subgradient(&self, x: &[f64], z: &Observation) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.subgradient_into(x, z, &mut g);
        g
    }

    pub fn value_and_subgradient(&self, x: &[f64], z: &Observation) -> (f64, Vec<f64>) {
        (self.value(x, z), self.subgradient(x, z))
    }

    pub fn constants(&self) -> LossConstants {
        match self {
            Loss::Logistic { feature_bound } => LossConstants {
                lipschitz: *feature_bound,
                smoothness: Some(0.25 * feature_bound * feature_bound),
                strong_convexity: None,
                upper_at_zero: std::f64::consts::LN_2,
                lower_bound: 0.0,
                rademacher: Some(*feature_bound),
            },
            Loss::Hinge { feature_bound } => LossConstants {
                lipschitz: *feature_bound,
                smoothness: None,
                strong_convexity: None,
                upper_at_zero: 1.0,
                lower_bound: 0.0,
                rademacher: Some(*feature_bound),
            },
            Loss::Tikhonov { base, gamma, radius } => {
                let b = base.constants();
                LossConstants {
                    lipschitz: b.lipschitz + gamma * radius,
                    smoothness: b.smoothness.map(|beta| beta + gamma),
                    strong_convexity: Some(*gamma),
                    upper_at_zero: b.upper_at_zero,
                    lower_bound: b.lower_bound,
                    rademacher: None,
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Loss::Logistic { .. } => "logistic".into(),
            Loss::Hinge { .. } => "hinge".into(),
            Loss::Tikhonov { base, gamma, .. } => format!("tikhonov({},{gamma})", base.name()),
        }
    }

    /// Empirical risk over a set of observations.
    pub fn risk<'a>(&self, x: &[f64], data: impl IntoIterator<Item = &'a Observation>) -> f64 {
        let (sum, count) = data
            .into_iter()
            .fold((0.0, 0usize), |(s, c), z| (s + self.value(x, z), c + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

/// Logistic loss value and gradient (unit feature bound).
pub fn logistic(x: &[f64], z: &Observation) -> (f64, Vec<f64>) {
    Loss::logistic().value_and_subgradient(x, z)
}

/// Hinge loss value and subgradient (unit feature bound).
pub fn hinge(x: &[f64], z: &Observation) -> (f64, Vec<f64>) {
    Loss::hinge().value_and_subgradient(x, z)
}

pub fn tikhonov_wrap(base: Loss, gamma: f64, radius: f64) -> Result<Loss> {
    Loss::tikhonov(base, gamma, radius)
}

/// ‖∂l(x, z)‖, used by spot checks of the declared Lipschitz constant.
pub fn subgradient_norm(loss: &Loss, x: &[f64], z: &Observation) -> f64 {
    norm(&loss.subgradient(x, z))
}
