//! Empirical algorithmic stability: coupled runs on datasets that differ in a
//! single observation, and the generalisation gap estimated through the
//! stability identity.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{stability_bound_rows, Convexity};
use crate::data::{DataGenerator, Dataset};
use crate::engine::{Dsgd, Recording, RunConfig, Variant};
use crate::error::{Error, Result};
use crate::graph::{Graph, MixingMatrix};
use crate::loss::{Loss, Observation};
use crate::rng::derive_seed;
use crate::vecops::{dist, mean_stderr};

/// Largest `n m` for which every perturbation pair may be enumerated.
pub const EXHAUSTIVE_PAIR_LIMIT: usize = 16;

/// Observation `index` at `node` replaced by `replacement`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub node: usize,
    pub index: usize,
    pub replacement: Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledTrace {
    pub node: usize,
    pub index: usize,
    pub rounds: Vec<usize>,
    /// `‖X̃_v^s - X_v^s‖`, indexed `[checkpoint][v]`.
    pub deviations: Vec<Vec<f64>>,
    /// `ℓ(X_v^s, Z̃) - ℓ(X̃_v^s, Z̃)`, indexed `[checkpoint][v]`.
    pub loss_gaps: Vec<Vec<f64>>,
}

impl CoupledTrace {
    /// Checks that no node further than `s - 1` hops from the perturbed node
    /// has moved by round `s`.
    pub fn check_support(&self, graph: &Graph) -> Result<()> {
        let distances = graph.distances_from(self.node);
        for (&s, row) in self.rounds.iter().zip(&self.deviations) {
            for (v, &delta) in row.iter().enumerate() {
                let far = distances[v].is_none_or(|d| d + 1 > s);
                if far && delta != 0.0 {
                    return Err(Error::InvariantViolation(format!(
                        "node {v} deviates by {delta:e} at round {s} but is {:?} hops from node {}",
                        distances[v], self.node
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Runs the original and perturbed datasets in lockstep on the same sampled
/// indices.
pub fn coupled_run(config: &RunConfig<'_>, spec: &PerturbationSpec) -> Result<CoupledTrace> {
    let perturbed = config.data.with_replacement(spec.node, spec.index, spec.replacement.clone())?;
    let mut original = Dsgd::new(config.clone())?;
    let mut other = Dsgd::new(RunConfig { data: &perturbed, ..config.clone() })?;
    let t = config.horizon;
    let rounds = config.recording.checkpoints(t);
    let mut deviations = Vec::with_capacity(rounds.len());
    let mut loss_gaps = Vec::with_capacity(rounds.len());
    let mut next = rounds.iter().peekable();
    let n = original.n();
    for s in 1..=t {
        if next.peek() == Some(&&s) {
            next.next();
            deviations.push((0..n).map(|v| dist(original.iterate(v), other.iterate(v))).collect());
            loss_gaps.push(
                (0..n)
                    .map(|v| {
                        config.loss.value(original.iterate(v), &spec.replacement)
                            - config.loss.value(other.iterate(v), &spec.replacement)
                    })
                    .collect(),
            );
        }
        if s < t {
            original.step()?;
            other.step()?;
            if original.last_indices() != other.last_indices() {
                return Err(Error::InvariantViolation(format!(
                    "coupled runs sampled different indices at round {}",
                    s + 1
                )));
            }
        }
    }
    Ok(CoupledTrace { node: spec.node, index: spec.index, rounds, deviations, loss_gaps })
}

/// Whether each replication redraws the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    /// Fresh training data every replication; estimates the full expectation.
    #[default]
    Redraw,
    /// One training set shared by all replications; estimates are
    /// conditional on it.
    Fixed,
}

impl std::str::FromStr for DataMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "redraw" => Ok(DataMode::Redraw),
            "fixed" => Ok(DataMode::Fixed),
            other => Err(Error::Config(format!("unknown data mode '{other}' (valid: redraw, fixed)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StabilityConfig<'a> {
    pub mixing: &'a MixingMatrix,
    pub loss: &'a Loss,
    pub generator: &'a DataGenerator,
    pub m: usize,
    pub eta: f64,
    pub horizon: usize,
    pub seed: u64,
    pub variant: Variant,
    pub recording: Recording,
    pub data_mode: DataMode,
    /// Assumption used for the paired theoretical bound.
    pub convexity: Convexity,
    /// Fresh draws used to estimate the population risk in the direct estimate.
    pub population_samples: usize,
}

impl<'a> StabilityConfig<'a> {
    pub fn new(
        mixing: &'a MixingMatrix,
        loss: &'a Loss,
        generator: &'a DataGenerator,
        m: usize,
        eta: f64,
        horizon: usize,
        seed: u64,
    ) -> Self {
        StabilityConfig {
            mixing,
            loss,
            generator,
            m,
            eta,
            horizon,
            seed,
            variant: Variant::Standard,
            recording: Recording::auto(horizon),
            data_mode: DataMode::Redraw,
            convexity: Convexity::Convex,
            population_samples: 10_000,
        }
    }

    fn dataset(&self, rep: usize) -> Result<Dataset> {
        let key = match self.data_mode {
            DataMode::Redraw => derive_seed(self.seed, &[0, rep as u64]),
            DataMode::Fixed => derive_seed(self.seed, &[0]),
        };
        self.generator.dataset(&mut ChaCha8Rng::seed_from_u64(key), self.mixing.n(), self.m)
    }

    fn resample_rng(&self, rep: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[1, rep as u64]))
    }

    fn index_seed(&self, rep: usize) -> u64 {
        derive_seed(self.seed, &[2, rep as u64])
    }

    fn run_config<'b>(&'b self, data: &'b Dataset, rep: usize) -> RunConfig<'b> {
        RunConfig {
            mixing: self.mixing,
            data,
            loss: self.loss,
            eta: self.eta,
            horizon: self.horizon,
            seed: self.index_seed(rep),
            variant: self.variant,
            recording: self.recording,
            record_indices: false,
            parallel: false,
        }
    }

    fn check(&self, reps: usize, min_reps: usize) -> Result<()> {
        if reps < min_reps {
            return Err(Error::param(format!("need at least {min_reps} replications, got {reps}")));
        }
        if self.m == 0 {
            return Err(Error::param("m must be >= 1"));
        }
        if self.generator.dim() == 0 {
            return Err(Error::param("dimension must be >= 1"));
        }
        Ok(())
    }
}

/// Mean deviation trajectory for one perturbed pair `(w, k)`, with the
/// theoretical bound at the same `(v, w, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityEstimate {
    pub w: usize,
    pub k: usize,
    pub reps: usize,
    pub rounds: Vec<usize>,
    /// Indexed `[checkpoint][v]`.
    pub mean: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    pub bound: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct StabilityRow {
    w: usize,
    k: usize,
    v: usize,
    t: usize,
    delta_mean: f64,
    delta_stderr: f64,
    bound: f64,
}

impl StabilityEstimate {
    /// Largest `mean - z stderr - bound` over all nodes and checkpoints;
    /// non-positive means the bound holds statistically.
    pub fn worst_excess(&self, z: f64) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for c in 0..self.rounds.len() {
            for v in 0..self.mean[c].len() {
                worst = worst.max(self.mean[c][v] - z * self.stderr[c][v] - self.bound[c][v]);
            }
        }
        worst
    }
}

/// CSV with columns `w,k,v,t,delta_mean,delta_stderr,bound`.
pub fn write_stability_csv<W: Write>(estimates: &[StabilityEstimate], writer: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    for e in estimates {
        for (c, &t) in e.rounds.iter().enumerate() {
            for v in 0..e.mean[c].len() {
                out.serialize(StabilityRow {
                    w: e.w,
                    k: e.k,
                    v,
                    t,
                    delta_mean: e.mean[c][v],
                    delta_stderr: e.stderr[c][v],
                    bound: e.bound[c][v],
                })?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn aggregate(samples: &[Vec<Vec<f64>>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let checkpoints = samples[0].len();
    let n = samples[0][0].len();
    let mut mean = vec![vec![0.0; n]; checkpoints];
    let mut stderr = vec![vec![0.0; n]; checkpoints];
    let mut column = Vec::with_capacity(samples.len());
    for c in 0..checkpoints {
        for v in 0..n {
            column.clear();
            column.extend(samples.iter().map(|s| s[c][v]));
            let (mu, se) = mean_stderr(&column);
            mean[c][v] = mu;
            stderr[c][v] = se;
        }
    }
    (mean, stderr)
}

/// Monte Carlo estimate of `E δ(w,k)_v^s` over `reps` independent draws of the
/// data (per `data_mode`), the replacement and the sampled indices.
pub fn stability_estimate(config: &StabilityConfig<'_>, w: usize, k: usize, reps: usize) -> Result<StabilityEstimate> {
    config.check(reps, 2)?;
    let n = config.mixing.n();
    if w >= n || k >= config.m {
        return Err(Error::param(format!("no observation ({w}, {k}) in a {n} x {} dataset", config.m)));
    }
    let traces = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let data = config.dataset(rep)?;
            let replacement = config.generator.observation(&mut config.resample_rng(rep));
            let spec = PerturbationSpec { node: w, index: k, replacement };
            Ok(coupled_run(&config.run_config(&data, rep), &spec)?.deviations)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, stderr) = aggregate(&traces);
    let rounds = config.recording.checkpoints(config.horizon);
    let lipschitz = config.loss.constants().lipschitz;
    // P is symmetric, so the (v, w) entry of the bound is row w at column v.
    let bound = stability_bound_rows(config.eta, lipschitz, config.m, config.mixing, w, &rounds, config.convexity)?;
    Ok(StabilityEstimate { w, k, reps, rounds, mean, stderr, bound })
}

/// How perturbation pairs are chosen for the generalisation estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSelection {
    /// This many `(w, k)` pairs drawn uniformly with replacement per replication.
    Sample(usize),
    /// Every pair; only for `n m <= 16`.
    Exhaustive,
}

/// Two estimates of `E[r(X_v^t) - R(X_v^t)]`, per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralisationEstimate {
    pub horizon: usize,
    pub reps: usize,
    pub pairs_per_rep: usize,
    pub exhaustive: bool,
    /// Through the stability identity.
    pub stability_mean: Vec<f64>,
    pub stability_stderr: Vec<f64>,
    /// Population risk (on fresh draws) minus training risk.
    pub direct_mean: Vec<f64>,
    pub direct_stderr: Vec<f64>,
}

/// Estimates the expected generalisation gap of `X_v^t` through
/// `(1/nm) sum_{w,k} E[ℓ(X_v^t, Z̃_{w,k}) - ℓ(X̃(w,k)_v^t, Z̃_{w,k})]`, subsampling
/// pairs, and directly as `E[r(X_v^t) - R(X_v^t)]`.
pub fn generalisation_estimate(
    config: &StabilityConfig<'_>,
    pairs: PairSelection,
    reps: usize,
) -> Result<GeneralisationEstimate> {
    config.check(reps, 2)?;
    let n = config.mixing.n();
    let nm = n * config.m;
    let pairs_per_rep = match pairs {
        PairSelection::Sample(0) => return Err(Error::param("need at least one perturbation pair")),
        PairSelection::Sample(count) => count,
        PairSelection::Exhaustive if nm > EXHAUSTIVE_PAIR_LIMIT => {
            return Err(Error::param(format!(
                "exhaustive pairs need n m <= {EXHAUSTIVE_PAIR_LIMIT}, got {nm}"
            )))
        }
        PairSelection::Exhaustive => nm,
    };
    if config.population_samples == 0 {
        return Err(Error::param("population_samples must be >= 1"));
    }
    let t = config.horizon;
    let final_only = Recording::Every(t.max(1));
    let per_rep = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<(Vec<f64>, Vec<f64>)> {
            let data = config.dataset(rep)?;
            let mut rng = config.resample_rng(rep);
            let run = RunConfig { recording: final_only, ..config.run_config(&data, rep) };
            let mut stability = vec![0.0; n];
            for p in 0..pairs_per_rep {
                let (w, k) = match pairs {
                    PairSelection::Exhaustive => (p / config.m, p % config.m),
                    PairSelection::Sample(_) => {
                        let i = rng.random_range(0..nm);
                        (i / config.m, i % config.m)
                    }
                };
                let replacement = config.generator.observation(&mut rng);
                let trace = coupled_run(&run, &PerturbationSpec { node: w, index: k, replacement })?;
                let gaps = trace.loss_gaps.last().expect("horizon is always recorded");
                stability.iter_mut().zip(gaps).for_each(|(a, g)| *a += g / pairs_per_rep as f64);
            }
            let mut sim = Dsgd::new(run)?;
            for _ in 1..t {
                sim.step()?;
            }
            let pool = config.generator.sample(&mut rng, config.population_samples);
            let direct = (0..n)
                .map(|v| config.loss.risk(sim.iterate(v), &pool) - config.loss.risk(sim.iterate(v), data.all()))
                .collect();
            Ok((stability, direct))
        })
        .collect::<Result<Vec<_>>>()?;
    let (stability, direct): (Vec<Vec<f64>>, Vec<Vec<f64>>) = per_rep.into_iter().unzip();
    let column = |rows: &[Vec<f64>], v: usize| mean_stderr(&rows.iter().map(|r| r[v]).collect::<Vec<_>>());
    let (stability_mean, stability_stderr): (Vec<f64>, Vec<f64>) = (0..n).map(|v| column(&stability, v)).unzip();
    let (direct_mean, direct_stderr): (Vec<f64>, Vec<f64>) = (0..n).map(|v| column(&direct, v)).unzip();
    Ok(GeneralisationEstimate {
        horizon: t,
        reps,
        pairs_per_rep,
        exhaustive: matches!(pairs, PairSelection::Exhaustive),
        stability_mean,
        stability_stderr,
        direct_mean,
        direct_stderr,
    })
}
