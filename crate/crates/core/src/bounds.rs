//! Closed-form generalisation, stability, network and optimisation bounds.
//!
//! `sigma2` arguments are the second largest absolute eigenvalue of the mixing
//! matrix; the spectral gap is `1 - sigma2`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::MixingMatrix;
use crate::schedules::{smooth_network_factor, ProblemConstants};

/// Convexity assumption used by the stability bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Convexity {
    Convex,
    /// `beta`-smooth and `gamma`-strongly convex.
    Strongly { beta: f64, gamma: f64 },
}

impl Convexity {
    /// Per-round contraction factor of the coupled iterates.
    pub fn contraction(&self, eta: f64) -> Result<f64> {
        match *self {
            Convexity::Convex => Ok(1.0),
            Convexity::Strongly { beta, gamma } => {
                if !(beta > 0.0 && gamma > 0.0) {
                    return Err(Error::param("beta and gamma must be > 0"));
                }
                if eta > 2.0 / (beta + gamma) {
                    return Err(Error::param(format!(
                        "strongly convex contraction needs eta <= 2/(beta+gamma) = {}, got {eta}",
                        2.0 / (beta + gamma)
                    )));
                }
                Ok(1.0 - eta * beta * gamma / (beta + gamma))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Empirical {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub inputs: BTreeMap<String, f64>,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub empirical: Option<Empirical>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub satisfied: Option<bool>,
    /// `value - empirical mean`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub slack: Option<f64>,
}

impl BoundReport {
    pub fn new<'a>(name: &str, inputs: impl IntoIterator<Item = (&'a str, f64)>, value: f64) -> Self {
        BoundReport {
            name: name.to_string(),
            inputs: inputs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            value,
            empirical: None,
            satisfied: None,
            slack: None,
        }
    }

    /// Attaches an estimate; the bound counts as satisfied when the mean is
    /// within `z` standard errors below it.
    pub fn with_empirical(mut self, mean: f64, stderr: f64, z: f64) -> Self {
        self.empirical = Some(Empirical { mean, stderr });
        self.satisfied = Some(mean - z * stderr <= self.value);
        self.slack = Some(self.value - mean);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_gap_from(sigma2: f64) -> Result<f64> {
    let gap = 1.0 - sigma2;
    if gap > 0.0 && gap <= 1.0 {
        Ok(gap)
    } else {
        Err(Error::param(format!("sigma2 must lie in [0, 1), got {sigma2}")))
    }
}

fn check_t(t: usize) -> Result<f64> {
    if t == 0 {
        Err(Error::param("t must be >= 1"))
    } else {
        Ok(t as f64)
    }
}

fn nm(n: usize, m: usize) -> Result<f64> {
    if n == 0 || m == 0 {
        Err(Error::param("n and m must be >= 1"))
    } else {
        Ok((n * m) as f64)
    }
}

/// `2 eta L^2 (t-1) / (nm)`.
pub fn gen_bound_smooth(eta: f64, lipschitz: f64, n: usize, m: usize, t: usize) -> Result<f64> {
    let t = check_t(t)?;
    Ok(2.0 * eta * lipschitz * lipschitz * (t - 1.0) / nm(n, m)?)
}

/// `2 L^2 (beta + gamma) / (nm beta gamma)`, independent of `t` and `eta`.
pub fn gen_bound_strongly(lipschitz: f64, beta: f64, gamma: f64, n: usize, m: usize) -> Result<f64> {
    if !(beta > 0.0 && gamma > 0.0) {
        return Err(Error::param("beta and gamma must be > 0"));
    }
    Ok(2.0 * lipschitz * lipschitz * (beta + gamma) / (nm(n, m)? * beta * gamma))
}

/// `(t-1)(eta^2 L^2 + 2 eta (B - C))`, the squared iterate-norm bound.
fn iterate_norm_sq(eta: f64, lipschitz: f64, b: f64, c: f64, t: f64) -> Result<f64> {
    if b < c {
        return Err(Error::param(format!("B = {b} must be >= C = {c}")));
    }
    Ok((t - 1.0) * (eta * eta * lipschitz * lipschitz + 2.0 * eta * (b - c)))
}

/// `2 D sqrt((t-1)(eta^2 L^2 + 2 eta (B-C)) / (nm))`.
#[allow(clippy::too_many_arguments)]
pub fn gen_bound_nonsmooth(eta: f64, lipschitz: f64, b: f64, c: f64, d: f64, n: usize, m: usize, t: usize) -> Result<f64> {
    let t = check_t(t)?;
    Ok(2.0 * d * (iterate_norm_sq(eta, lipschitz, b, c, t)? / nm(n, m)?).sqrt())
}

/// `sqrt((t-1)(eta^2 L^2 + 2 eta (B-C)))`, a bound on every `‖X_v^t‖`.
pub fn iterate_norm_bound(eta: f64, lipschitz: f64, b: f64, c: f64, t: usize) -> Result<f64> {
    let t = check_t(t)?;
    Ok(iterate_norm_sq(eta, lipschitz, b, c, t)?.sqrt())
}

/// `(2 eta L / m) sum_{s=1}^{t-1} iota^{s-1} (P^s)_{vw}` for every `w`, where
/// `iota` is the contraction factor of `convexity`.
pub fn stability_bound_row(
    eta: f64,
    lipschitz: f64,
    m: usize,
    p: &MixingMatrix,
    v: usize,
    t: usize,
    convexity: Convexity,
) -> Result<Vec<f64>> {
    Ok(stability_bound_rows(eta, lipschitz, m, p, v, &[t], convexity)?.remove(0))
}

/// [`stability_bound_row`] at each of the ascending horizons in `rounds`,
/// accumulated in a single pass over the powers of `P`.
pub fn stability_bound_rows(
    eta: f64,
    lipschitz: f64,
    m: usize,
    p: &MixingMatrix,
    v: usize,
    rounds: &[usize],
    convexity: Convexity,
) -> Result<Vec<Vec<f64>>> {
    if rounds.contains(&0) {
        return Err(Error::param("t must be >= 1"));
    }
    if rounds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::param("horizons must be ascending"));
    }
    if m == 0 {
        return Err(Error::param("m must be >= 1"));
    }
    let n = p.n();
    if v >= n {
        return Err(Error::param(format!("node {v} out of range")));
    }
    let iota = convexity.contraction(eta)?;
    let scale = 2.0 * eta * lipschitz / m as f64;
    let mut current = vec![0.0; n];
    current[v] = 1.0;
    let mut acc = vec![0.0; n];
    let mut weight = 1.0;
    let mut s = 0;
    let mut out = Vec::with_capacity(rounds.len());
    for &t in rounds {
        while s + 1 < t {
            s += 1;
            // e_v P^s = (e_v P^{s-1}) P, using symmetry of P.
            current = (0..n).map(|w| p.row(w).iter().map(|&(u, pw)| pw * current[u]).sum()).collect();
            acc.iter_mut().zip(&current).for_each(|(a, c)| *a += weight * c);
            weight *= iota;
        }
        out.push(acc.iter().map(|a| a * scale).collect());
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn stability_bound(
    eta: f64,
    lipschitz: f64,
    m: usize,
    p: &MixingMatrix,
    v: usize,
    w: usize,
    t: usize,
    convexity: Convexity,
) -> Result<f64> {
    if w >= p.n() {
        return Err(Error::param(format!("node {w} out of range")));
    }
    Ok(stability_bound_row(eta, lipschitz, m, p, v, t, convexity)?[w])
}

/// `eta^2 min(L^2, kappa^2) (2 log(s sqrt n)/(1 - sigma2) + 1)^2`.
pub fn network_term_bound(eta: f64, lipschitz: f64, kappa: f64, n: usize, sigma2: f64, s: usize) -> Result<f64> {
    let gap = check_gap_from(sigma2)?;
    let s = check_t(s)?;
    if n == 0 {
        return Err(Error::param("n must be >= 1"));
    }
    let cap = (lipschitz * lipschitz).min(kappa * kappa);
    let factor = 2.0 * (s * (n as f64).sqrt()).ln() / gap + 1.0;
    Ok(eta * eta * cap * factor * factor)
}

/// Optimisation error for smooth losses with `eta = 1/(beta + 1/rho)`:
/// `rho sigma^2/2 + (beta+1/rho) G^2/(2t)
///  + 3 kappa/(beta+1/rho) Lambda (L + (3/2) beta (3 + beta rho) kappa/(beta+1/rho) Lambda)`
/// with `Lambda = log((t+1) sqrt n)/(1 - sigma2)`.
pub fn opt_bound_smooth(rho: f64, t: usize, n: usize, sigma2: f64, consts: &ProblemConstants) -> Result<f64> {
    let gap = check_gap_from(sigma2)?;
    let tf = check_t(t)?;
    if !(rho > 0.0) {
        return Err(Error::param("rho must be > 0"));
    }
    if n == 0 {
        return Err(Error::param("n must be >= 1"));
    }
    let beta = consts.beta()?;
    let (l, g, kappa, sigma) = (consts.lipschitz, consts.g, consts.kappa, consts.sigma);
    let inv_eta = beta + 1.0 / rho;
    let lambda = smooth_network_factor(tf, n as f64, gap);
    Ok(rho * sigma * sigma / 2.0
        + inv_eta * g * g / (2.0 * tf)
        + 3.0 * kappa / inv_eta * lambda * (l + 1.5 * beta * (3.0 + beta * rho) * kappa / inv_eta * lambda))
}

/// `(eta L^2 / 2) 19 log(t sqrt n)/(1 - sigma2) + G^2/(2 eta t)`.
pub fn opt_bound_nonsmooth(eta: f64, t: usize, n: usize, sigma2: f64, consts: &ProblemConstants) -> Result<f64> {
    let gap = check_gap_from(sigma2)?;
    let tf = check_t(t)?;
    if !(eta > 0.0) {
        return Err(Error::param("eta must be > 0"));
    }
    if n == 0 {
        return Err(Error::param("n must be >= 1"));
    }
    let l = consts.lipschitz;
    Ok(eta * l * l / 2.0 * 19.0 * (tf * (n as f64).sqrt()).ln() / gap + consts.g * consts.g / (2.0 * eta * tf))
}

/// Generalisation part of the smooth test bound: `L^2 (t+1) / (nm (beta + 1/rho))`.
pub fn test_gen_term_smooth(rho: f64, t: usize, n: usize, m: usize, consts: &ProblemConstants) -> Result<f64> {
    let tf = check_t(t)?;
    let beta = consts.beta()?;
    Ok(consts.lipschitz.powi(2) * (tf + 1.0) / (nm(n, m)? * (beta + 1.0 / rho)))
}

pub fn test_bound_smooth(rho: f64, t: usize, n: usize, m: usize, sigma2: f64, consts: &ProblemConstants) -> Result<f64> {
    Ok(test_gen_term_smooth(rho, t, n, m, consts)? + opt_bound_smooth(rho, t, n, sigma2, consts)?)
}

pub fn test_bound_nonsmooth(eta: f64, t: usize, n: usize, m: usize, sigma2: f64, consts: &ProblemConstants) -> Result<f64> {
    let (b, c, d) = consts.range_constants()?;
    Ok(gen_bound_nonsmooth(eta, consts.lipschitz, b, c, d, n, m, t)? + opt_bound_nonsmooth(eta, t, n, sigma2, consts)?)
}
