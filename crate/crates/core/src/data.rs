//! Training data laid out as an `n x m` grid and the synthetic generator for
//! linearly labelled observations.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Observation;
use crate::vecops::norm;

/// `m` local observations at each of `n` nodes, stored node-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n: usize,
    m: usize,
    observations: Vec<Observation>,
}

impl Dataset {
    pub fn new(n: usize, m: usize, observations: Vec<Observation>) -> Result<Dataset> {
        if n == 0 || m == 0 {
            return Err(Error::param("dataset needs n >= 1 and m >= 1"));
        }
        if observations.len() != n * m {
            return Err(Error::param(format!(
                "dataset of {n} x {m} needs {} observations, got {}",
                n * m,
                observations.len()
            )));
        }
        let d = observations[0].features.len();
        if observations.iter().any(|z| z.features.len() != d) {
            return Err(Error::param("observations have mixed dimensions"));
        }
        Ok(Dataset { n, m, observations })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.observations[0].features.len()
    }

    #[inline]
    pub fn get(&self, node: usize, k: usize) -> &Observation {
        &self.observations[node * self.m + k]
    }

    pub fn local(&self, node: usize) -> &[Observation] {
        &self.observations[node * self.m..(node + 1) * self.m]
    }

    pub fn all(&self) -> &[Observation] {
        &self.observations
    }

    /// Copy with observation `(node, k)` replaced.
    pub fn with_replacement(&self, node: usize, k: usize, z: Observation) -> Result<Dataset> {
        if node >= self.n || k >= self.m {
            return Err(Error::param(format!("no observation ({node}, {k}) in a {} x {} dataset", self.n, self.m)));
        }
        let mut out = self.clone();
        out.observations[node * self.m + k] = z;
        Ok(out)
    }

    /// All observations pooled on a single node, for the centralised baseline.
    pub fn pooled(&self) -> Dataset {
        Dataset { n: 1, m: self.n * self.m, observations: self.observations.clone() }
    }
}

/// How feature vectors are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSampling {
    /// Uniform in the unit ball `{‖w‖ <= 1}`.
    #[default]
    Ball,
    /// Uniform on the unit sphere `{‖w‖ = 1}`.
    Sphere,
}

impl std::str::FromStr for FeatureSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ball" => Ok(FeatureSampling::Ball),
            "sphere" => Ok(FeatureSampling::Sphere),
            other => Err(Error::Config(format!("unknown feature sampling '{other}' (valid: ball, sphere)"))),
        }
    }
}

pub fn standard_gaussian<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn sample_features<R: Rng + ?Sized>(rng: &mut R, d: usize, sampling: FeatureSampling) -> Vec<f64> {
    loop {
        let mut w = standard_gaussian(rng, d);
        let nrm = norm(&w);
        if nrm == 0.0 {
            continue;
        }
        let radius = match sampling {
            FeatureSampling::Sphere => 1.0,
            FeatureSampling::Ball => rng.random::<f64>().powf(1.0 / d as f64),
        };
        w.iter_mut().for_each(|a| *a *= radius / nrm);
        return w;
    }
}

/// `y = sign(<w, truth>)` with `sign(0) = +1`.
pub fn label(features: &[f64], truth: &[f64]) -> f64 {
    if crate::vecops::dot(features, truth) >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn sample_observation<R: Rng + ?Sized>(rng: &mut R, truth: &[f64], sampling: FeatureSampling) -> Observation {
    let w = sample_features(rng, truth.len(), sampling);
    let y = label(&w, truth);
    Observation::new(w, y)
}

/// The linear-label distribution: features from `sampling`, labels from a
/// fixed true parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataGenerator {
    pub truth: Vec<f64>,
    pub sampling: FeatureSampling,
}

impl DataGenerator {
    pub fn new(truth: Vec<f64>, sampling: FeatureSampling) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::param("dimension must be >= 1"));
        }
        Ok(DataGenerator { truth, sampling })
    }

    /// True parameter drawn from a standard Gaussian.
    pub fn gaussian_truth<R: Rng + ?Sized>(rng: &mut R, d: usize, sampling: FeatureSampling) -> Result<Self> {
        Self::new(standard_gaussian(rng, d), sampling)
    }

    pub fn dim(&self) -> usize {
        self.truth.len()
    }

    pub fn observation<R: Rng + ?Sized>(&self, rng: &mut R) -> Observation {
        sample_observation(rng, &self.truth, self.sampling)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<Observation> {
        (0..count).map(|_| self.observation(rng)).collect()
    }

    pub fn dataset<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, m: usize) -> Result<Dataset> {
        Dataset::new(n, m, self.sample(rng, n * m))
    }
}
