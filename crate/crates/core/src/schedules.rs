//! Graph-dependent step-size rules and early-stopping horizons.
//!
//! Smooth losses are parametrised by `rho` with `eta = 1/(beta + 1/rho)`;
//! non-smooth losses by `eta` directly. Logs are natural.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_c() -> f64 {
    1.0
}

/// Problem constants shared by the schedules and the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConstants {
    #[serde(rename = "L")]
    pub lipschitz: f64,
    #[serde(default)]
    pub beta: Option<f64>,
    /// Bound on the minimiser norm.
    #[serde(rename = "G")]
    pub g: f64,
    /// Gradient variance cap (`sigma`, not squared).
    pub sigma: f64,
    /// Variance-plus-deviation cap.
    pub kappa: f64,
    #[serde(rename = "B", default)]
    pub b: Option<f64>,
    #[serde(rename = "C", default)]
    pub c_lower: Option<f64>,
    #[serde(rename = "D", default)]
    pub d: Option<f64>,
    /// Free scale in the centralised rho.
    #[serde(default = "default_c")]
    pub c: f64,
}

impl ProblemConstants {
    /// `sigma = 2L` and `kappa = L`, the caps used for Lipschitz losses in the
    /// simulations.
    pub fn lipschitz_caps(lipschitz: f64, beta: Option<f64>, g: f64) -> Self {
        ProblemConstants {
            lipschitz,
            beta,
            g,
            sigma: 2.0 * lipschitz,
            kappa: lipschitz,
            b: None,
            c_lower: None,
            d: None,
            c: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(format!("{name} must be finite and > 0, got {v}")))
            }
        };
        positive("L", self.lipschitz)?;
        positive("G", self.g)?;
        positive("c", self.c)?;
        if let Some(beta) = self.beta {
            positive("beta", beta)?;
        }
        if let Some(d) = self.d {
            positive("D", d)?;
        }
        for (name, v) in [("sigma", self.sigma), ("kappa", self.kappa)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if let (Some(b), Some(c)) = (self.b, self.c_lower) {
            if b < c {
                return Err(Error::param(format!("B = {b} must be >= C = {c}")));
            }
        }
        Ok(())
    }

    pub fn beta(&self) -> Result<f64> {
        self.beta.ok_or_else(|| Error::param("smoothness constant beta is required"))
    }

    /// `(B, C, D)` for the non-smooth bounds.
    pub fn range_constants(&self) -> Result<(f64, f64, f64)> {
        match (self.b, self.c_lower, self.d) {
            (Some(b), Some(c), Some(d)) => Ok((b, c, d)),
            _ => Err(Error::param("non-smooth constants B, C and D are required")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Smooth,
    Nonsmooth,
}

/// Which quantity the step size is tuned for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Centralised rate, ignores the graph.
    Star,
    /// Minimises the optimisation error bound.
    Opt,
    /// Minimises the test error bound.
    Test,
}

impl Schedule {
    pub const ALL: [Schedule; 3] = [Schedule::Star, Schedule::Opt, Schedule::Test];
}

macro_rules! lowercase_enum_text {
    ($ty:ty, $($variant:ident => $text:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok(Self::$variant),)+
                    other => Err(Error::param(format!("unknown {}: {other}", stringify!($ty).to_lowercase()))),
                }
            }
        }
    };
}

lowercase_enum_text!(Regime, Smooth => "smooth", Nonsmooth => "nonsmooth");
lowercase_enum_text!(Schedule, Star => "star", Opt => "opt", Test => "test");

fn check_gap(gap: f64) -> Result<()> {
    if gap > 0.0 && gap <= 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("spectral gap must lie in (0, 1], got {gap}")))
    }
}

fn check_t(t: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::param("horizon must be >= 1"));
    }
    Ok(t as f64)
}

fn check_nm(n: usize, m: usize) -> Result<(f64, f64)> {
    if n == 0 || m == 0 {
        return Err(Error::param("n and m must be >= 1"));
    }
    Ok((n as f64, m as f64))
}

/// `log((t+1) sqrt(n)) / gap`, the network factor of the smooth bounds.
pub fn smooth_network_factor(t: f64, n: f64, gap: f64) -> f64 {
    ((t + 1.0) * n.sqrt()).ln() / gap
}

/// `eta = 1/(beta + 1/rho)`.
pub fn eta_from_rho(rho: f64, beta: f64) -> Result<f64> {
    if !(rho > 0.0) || !(beta > 0.0) {
        return Err(Error::param(format!("rho and beta must be > 0, got rho={rho}, beta={beta}")));
    }
    let eta = 1.0 / (beta + 1.0 / rho);
    if eta * beta > 2.0 {
        return Err(Error::InvariantViolation(format!("eta*beta = {} exceeds 2", eta * beta)));
    }
    Ok(eta)
}

/// `G / (L c sqrt(t))`.
pub fn rho_star(t: usize, consts: &ProblemConstants) -> Result<f64> {
    let t = check_t(t)?;
    Ok(consts.g / (consts.lipschitz * consts.c * t.sqrt()))
}

fn rho_tuned(t: usize, n: usize, m: usize, gap: f64, consts: &ProblemConstants, include_gen: bool) -> Result<f64> {
    let tf = check_t(t)?;
    check_gap(gap)?;
    let (nf, mf) = check_nm(n, m)?;
    let l = consts.lipschitz;
    let mut under = 6.0 * l * consts.kappa * smooth_network_factor(tf, nf, gap) + consts.sigma.powi(2);
    if include_gen {
        under += 2.0 * l * l * (tf + 1.0) / (nf * mf);
    }
    if !(under > 0.0) {
        return Err(Error::param("sigma and kappa are both zero; the optimal rho is unbounded"));
    }
    Ok(consts.g / (tf.sqrt() * under.sqrt()))
}

/// `G / (sqrt(t) sqrt(6 L kappa log((t+1) sqrt n)/gap + sigma^2))`.
pub fn rho_opt(t: usize, n: usize, m: usize, gap: f64, consts: &ProblemConstants) -> Result<f64> {
    rho_tuned(t, n, m, gap, consts, false)
}

/// As [`rho_opt`] with the generalisation term `2 L^2 (t+1)/(nm)` under the root.
pub fn rho_test(t: usize, n: usize, m: usize, gap: f64, consts: &ProblemConstants) -> Result<f64> {
    rho_tuned(t, n, m, gap, consts, true)
}

/// `G / (L sqrt(19 t))`.
pub fn eta_star(t: usize, consts: &ProblemConstants) -> Result<f64> {
    let t = check_t(t)?;
    Ok(consts.g / (consts.lipschitz * (19.0 * t).sqrt()))
}

/// `eta_star * sqrt(gap / log(t sqrt n))`; needs `t sqrt(n) > 1`.
pub fn eta_opt(t: usize, n: usize, gap: f64, consts: &ProblemConstants) -> Result<f64> {
    let tf = check_t(t)?;
    check_gap(gap)?;
    let (nf, _) = check_nm(n, 1)?;
    let log = (tf * nf.sqrt()).ln();
    if !(log > 0.0) {
        return Err(Error::param(format!("log(t sqrt(n)) must be positive, got t={t}, n={n}")));
    }
    Ok(eta_star(t, consts)? * (gap / log).sqrt())
}

/// `(G/(L sqrt t)) / sqrt((19/2) log(t sqrt n)/gap + t/(nm)^(2/3))`.
pub fn eta_test(t: usize, n: usize, m: usize, gap: f64, consts: &ProblemConstants) -> Result<f64> {
    let tf = check_t(t)?;
    check_gap(gap)?;
    let (nf, mf) = check_nm(n, m)?;
    let log = (tf * nf.sqrt()).ln();
    let under = 9.5 * log / gap + tf / (nf * mf).powf(2.0 / 3.0);
    Ok(consts.g / (consts.lipschitz * tf.sqrt()) / under.sqrt())
}

/// Smooth regime: `rho` for the schedule.
pub fn rho_for(schedule: Schedule, t: usize, n: usize, m: usize, gap: f64, consts: &ProblemConstants) -> Result<f64> {
    match schedule {
        Schedule::Star => rho_star(t, consts),
        Schedule::Opt => rho_opt(t, n, m, gap, consts),
        Schedule::Test => rho_test(t, n, m, gap, consts),
    }
}

/// The step size actually run for `(regime, schedule)` at horizon `t`.
pub fn step_size(
    regime: Regime,
    schedule: Schedule,
    t: usize,
    n: usize,
    m: usize,
    gap: f64,
    consts: &ProblemConstants,
) -> Result<f64> {
    match regime {
        Regime::Smooth => eta_from_rho(rho_for(schedule, t, n, m, gap, consts)?, consts.beta()?),
        Regime::Nonsmooth => match schedule {
            Schedule::Star => eta_star(t, consts),
            Schedule::Opt => eta_opt(t, n, gap, consts),
            Schedule::Test => eta_test(t, n, m, gap, consts),
        },
    }
}

/// Order-of-magnitude early-stopping horizon with unit constants. `smooth_multiplier`
/// scales the smooth rule `nm/gap`.
pub fn horizon(regime: Regime, schedule: Schedule, n: usize, m: usize, gap: f64, smooth_multiplier: f64) -> Result<usize> {
    check_gap(gap)?;
    let (nf, mf) = check_nm(n, m)?;
    if !(smooth_multiplier > 0.0) {
        return Err(Error::param("horizon multiplier must be > 0"));
    }
    let nm = nf * mf;
    let t = match (regime, schedule) {
        (Regime::Smooth, _) => smooth_multiplier * nm / gap,
        (Regime::Nonsmooth, Schedule::Star) => nm.powf(2.0 / 3.0) / gap.powf(4.0 / 3.0),
        (Regime::Nonsmooth, _) => nm.powf(2.0 / 3.0) / gap,
    };
    Ok(ceil_horizon(t))
}

fn ceil_horizon(t: f64) -> usize {
    // Guard against 18.000000000000004 style round-off before taking the ceiling.
    let r = t.round();
    let t = if (t - r).abs() <= 1e-9 * r.max(1.0) { r } else { t.ceil() };
    (t as usize).max(1)
}

/// Early-stopping horizon with the explicit constants of the tuning
/// calculations. Rules containing `log(t sqrt n)` are resolved with one
/// fixed-point iteration from the log-free seed.
pub fn explicit_horizon(
    regime: Regime,
    schedule: Schedule,
    n: usize,
    m: usize,
    gap: f64,
    consts: &ProblemConstants,
) -> Result<usize> {
    check_gap(gap)?;
    let (nf, mf) = check_nm(n, m)?;
    let nm = nf * mf;
    let l = consts.lipschitz;
    let t = match (regime, schedule) {
        (Regime::Smooth, Schedule::Star) => 1.5 * consts.kappa / l * nm / gap,
        (Regime::Smooth, _) => {
            // t / log((t+1) sqrt n) = 3 (kappa/L) nm / gap
            let ratio = 3.0 * consts.kappa / l * nm / gap;
            ratio * ((ratio + 1.0) * nf.sqrt()).ln().max(1.0)
        }
        (Regime::Nonsmooth, _) => {
            let (b, c, d) = consts.range_constants()?;
            if !(b > c) {
                return Err(Error::param("explicit non-smooth horizons need B > C"));
            }
            let base = 19.0 * l * l * (consts.g * nm).powf(2.0 / 3.0) / ((2.0 * (b - c)).powf(2.0 / 3.0) * d.powf(4.0 / 3.0));
            let (gap_power, log_power) = if schedule == Schedule::Star { (4.0 / 3.0, 4.0 / 3.0) } else { (1.0, 1.0) };
            let seed = base / gap.powf(gap_power);
            seed * (seed * nf.sqrt()).ln().max(1.0).powf(log_power)
        }
    };
    Ok(ceil_horizon(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn consts() -> ProblemConstants {
        ProblemConstants {
            lipschitz: 1.0,
            beta: Some(0.25),
            g: 1.0,
            sigma: 2.0,
            kappa: 1.0,
            b: Some(1.0),
            c_lower: Some(0.0),
            d: Some(1.0),
            c: 1.0,
        }
    }

    #[test]
    fn eta_from_rho_values() {
        assert_relative_eq!(eta_from_rho(4.0, 0.25).unwrap(), 2.0);
        assert_relative_eq!(eta_from_rho(0.1, 0.25).unwrap(), 1.0 / 10.25);
        assert_relative_eq!(eta_from_rho(1e12, 0.25).unwrap(), 4.0, max_relative = 1e-10);
        assert!(eta_from_rho(0.0, 0.25).is_err());
    }

    #[test]
    fn rho_values() {
        assert_relative_eq!(rho_star(100, &consts()).unwrap(), 0.1);
        // rho_test at t=100, n=9, m=2, sigma2 = 1/3 recomputed term by term.
        let log = (101.0f64 * 3.0).ln();
        let expected = 1.0 / (10.0 * (6.0 * log / (2.0 / 3.0) + 4.0 + 2.0 * 101.0 / 18.0).sqrt());
        let got = rho_test(100, 9, 2, 2.0 / 3.0, &consts()).unwrap();
        assert_relative_eq!(got, expected, max_relative = 1e-12);
        assert_relative_eq!(got, 0.012249, max_relative = 1e-4);
        // gap = 1, kappa = 0: centralised noise-limited rate G/(sigma sqrt t).
        let k0 = ProblemConstants { kappa: 0.0, ..consts() };
        assert_relative_eq!(rho_opt(100, 9, 2, 1.0, &k0).unwrap(), 1.0 / (2.0 * 10.0), max_relative = 1e-12);
        let both_zero = ProblemConstants { kappa: 0.0, sigma: 0.0, ..consts() };
        assert!(rho_opt(100, 9, 2, 1.0, &both_zero).is_err());
        assert!(rho_opt(100, 9, 2, 0.0, &consts()).is_err());
    }

    #[test]
    fn eta_values() {
        assert_relative_eq!(eta_star(19, &consts()).unwrap(), 1.0 / 19.0, max_relative = 1e-14);
        // n = 1 and t = e make log(t sqrt n) = 1; t must be an integer, so use
        // the identity eta_opt = eta_star sqrt(gap/log) directly instead.
        let t = 50;
        let log = (50.0f64 * 3.0).ln();
        assert_relative_eq!(
            eta_opt(t, 9, 1.0, &consts()).unwrap(),
            eta_star(t, &consts()).unwrap() / log.sqrt(),
            max_relative = 1e-14
        );
        assert!(eta_opt(1, 1, 1.0, &consts()).is_err());
        // Large-t behaviour: G (nm)^(1/3) / (L t).
        let t = 100_000_000;
        let limit = 18f64.powf(1.0 / 3.0) / t as f64;
        assert_relative_eq!(eta_test(t, 9, 2, 0.5, &consts()).unwrap(), limit, max_relative = 1e-3);
    }

    #[test]
    fn horizons() {
        assert_eq!(horizon(Regime::Smooth, Schedule::Test, 9, 2, 1.0, 1.0).unwrap(), 18);
        assert_eq!(horizon(Regime::Nonsmooth, Schedule::Star, 1000, 1, 0.1, 1.0).unwrap(), 2155);
        assert_eq!(horizon(Regime::Nonsmooth, Schedule::Opt, 1000, 1, 1.0, 1.0).unwrap(), 100);
        assert_eq!(horizon(Regime::Smooth, Schedule::Star, 500, 2, 1.0, 1.0).unwrap(), 1000);
        assert!(horizon(Regime::Smooth, Schedule::Star, 9, 2, 1.5, 1.0).is_err());
    }

    #[test]
    fn explicit_horizons() {
        let c = consts();
        // Smooth star: 3 kappa/(2L) nm / gap.
        assert_eq!(explicit_horizon(Regime::Smooth, Schedule::Star, 9, 2, 1.0, &c).unwrap(), 27);
        // Smooth opt: one fixed-point step of t = ratio log((t+1) sqrt n).
        let ratio = 3.0 * 18.0;
        let expected = (ratio * ((ratio + 1.0) * 3.0f64).ln()).ceil() as usize;
        assert_eq!(explicit_horizon(Regime::Smooth, Schedule::Opt, 9, 2, 1.0, &c).unwrap(), expected);
        // The star rule picks up gap^(4/3) rather than gap.
        let opt = explicit_horizon(Regime::Nonsmooth, Schedule::Opt, 9, 2, 0.2, &c).unwrap();
        let star = explicit_horizon(Regime::Nonsmooth, Schedule::Star, 9, 2, 0.2, &c).unwrap();
        assert!(star > opt);
    }

    #[test]
    fn schedules_decrease_in_t_and_increase_in_gap() {
        let c = consts();
        for regime in [Regime::Smooth, Regime::Nonsmooth] {
            for schedule in Schedule::ALL {
                let mut prev = f64::INFINITY;
                for t in (2..2000).step_by(37) {
                    let eta = step_size(regime, schedule, t, 9, 2, 0.3, &c).unwrap();
                    assert!(eta > 0.0 && eta < prev, "{regime} {schedule} t={t}");
                    prev = eta;
                }
            }
        }
        let mut prev = 0.0;
        for gap in [0.01, 0.05, 0.2, 0.6, 1.0] {
            let rho = rho_opt(500, 16, 2, gap, &c).unwrap();
            let eta = eta_opt(500, 16, gap, &c).unwrap();
            assert!(rho > prev);
            prev = rho;
            assert!(eta > 0.0);
        }
        for t in [1, 10, 1000] {
            assert!(rho_test(t, 9, 2, 0.3, &c).unwrap() <= rho_opt(t, 9, 2, 0.3, &c).unwrap());
        }
    }

    #[test]
    fn constants_from_toml_names() {
        let c: ProblemConstants = serde_json::from_str(r#"{"L": 1.0, "G": 2.0, "sigma": 2.0, "kappa": 1.0}"#).unwrap();
        assert_eq!(c.c, 1.0);
        assert!(c.beta.is_none());
        c.validate().unwrap();
        assert!(ProblemConstants { lipschitz: -1.0, ..c }.validate().is_err());
    }
}
