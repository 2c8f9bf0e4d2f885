//! Synthetic logistic-regression tasks, schedule sweeps over topologies, an
//! exhaustive-enumeration oracle for tiny instances, and spectral-gap scaling.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DataGenerator, Dataset, FeatureSampling};
use crate::engine::{dsgd_run, nedic_step, projected_dsgd_step, dsgd_step, Dsgd, Recording, RunConfig, Variant};
use crate::error::{Error, Result};
use crate::graph::{build_graph, mixing_matrix, MixingMatrix, Topology};
use crate::loss::{Loss, Observation};
use crate::rng::derive_seed;
use crate::schedules::{rho_for, step_size, ProblemConstants, Regime, Schedule};
use crate::vecops::{dist, dot, mean_stderr, norm};

/// Training grid, out-of-sample pool and the parameter that labels them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub seed: u64,
    pub generator: DataGenerator,
    pub train: Dataset,
    pub pool: Vec<Observation>,
}

impl SyntheticTask {
    pub fn dim(&self) -> usize {
        self.generator.dim()
    }
}

pub fn generate_task(d: usize, n: usize, m: usize, nhat: usize, seed: u64, sampling: FeatureSampling) -> Result<SyntheticTask> {
    if d == 0 || n == 0 || m == 0 || nhat == 0 {
        return Err(Error::param("d, n, m and nhat must all be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let generator = DataGenerator::gaussian_truth(&mut rng, d, sampling)?;
    let train = generator.dataset(&mut rng, n, m)?;
    let pool = generator.sample(&mut rng, nhat);
    Ok(SyntheticTask { seed, generator, train, pool })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErmResult {
    pub x: Vec<f64>,
    /// `‖x‖`, used as the constant `G`.
    pub g: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const ERM_TOLERANCE: f64 = 1e-10;
pub const ERM_MAX_ITER: usize = 1_000_000;

fn risk_and_gradient(loss: &Loss, x: &[f64], data: &[Observation], grad: &mut [f64], scratch: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|a| *a = 0.0);
    let mut risk = 0.0;
    for z in data {
        risk += loss.value(x, z);
        loss.subgradient_into(x, z, scratch);
        grad.iter_mut().zip(scratch.iter()).for_each(|(g, s)| *g += s);
    }
    let k = data.len() as f64;
    grad.iter_mut().for_each(|g| *g /= k);
    risk / k
}

/// Full-batch gradient descent on the empirical risk with Armijo
/// backtracking, from zero, until `‖∇R‖ <= tolerance` or `max_iter`.
pub fn erm_reference(loss: &Loss, data: &[Observation], tolerance: f64, max_iter: usize) -> Result<ErmResult> {
    if data.is_empty() {
        return Err(Error::param("empty training set"));
    }
    let d = data[0].features.len();
    let mut x = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let mut trial = vec![0.0; d];
    let mut step = loss.constants().smoothness.map_or(1.0, |b| 1.0 / b);
    let mut risk = risk_and_gradient(loss, &x, data, &mut grad, &mut scratch);
    let mut iterations = 0;
    loop {
        let gnorm2 = dot(&grad, &grad);
        if gnorm2.sqrt() <= tolerance || iterations >= max_iter {
            break;
        }
        loop {
            trial.iter_mut().zip(&x).zip(&grad).for_each(|((t, xi), gi)| *t = xi - step * gi);
            let decrease = 0.5 * step * gnorm2;
            // Once the required decrease is below rounding error the test
            // carries no information; keep the step.
            let rounding = decrease <= 4.0 * f64::EPSILON * risk.abs();
            if rounding || loss.risk(&trial, data) <= risk - decrease || step < 1e-300 {
                break;
            }
            step *= 0.5;
        }
        std::mem::swap(&mut x, &mut trial);
        risk = risk_and_gradient(loss, &x, data, &mut grad, &mut scratch);
        iterations += 1;
    }
    let grad_norm = norm(&grad);
    let converged = grad_norm <= tolerance;
    if !converged {
        warn!("ERM stopped at the {max_iter}-iteration cap with gradient norm {grad_norm:.3e}; using the capped solution");
    }
    Ok(ErmResult { g: norm(&x), x, grad_norm, iterations, converged })
}

/// `max_v r̂(x_v)` with `r̂` the mean loss over `pool`.
pub fn out_of_sample_risk(loss: &Loss, pool: &[Observation], iterates: &[Vec<f64>]) -> f64 {
    iterates.iter().map(|x| loss.risk(x, pool)).fold(f64::NEG_INFINITY, f64::max)
}

/// `count` horizons `round(10^e)` with exponents evenly spaced in `[lo, hi]`.
pub fn log_spaced_horizons(lo: f64, hi: f64, count: usize) -> Vec<usize> {
    if count <= 1 {
        return vec![10f64.powf(lo).round().max(1.0) as usize];
    }
    (0..count)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (count - 1) as f64).round().max(1.0) as usize)
        .collect()
}

/// A sweep cell's graph: one of the topologies, or the single-node baseline
/// holding all `nm` observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Network {
    Complete,
    Grid,
    Cycle,
    AllData,
}

impl Network {
    pub fn name(&self) -> &'static str {
        match self {
            Network::Complete => "complete",
            Network::Grid => "grid",
            Network::Cycle => "cycle",
            Network::AllData => "alldata",
        }
    }

    fn topology(&self) -> Option<Topology> {
        match self {
            Network::Complete => Some(Topology::Complete),
            Network::Grid => Some(Topology::Grid),
            Network::Cycle => Some(Topology::Cycle),
            Network::AllData => None,
        }
    }

    fn id(&self) -> u64 {
        *self as u64
    }
}

impl std::str::FromStr for Network {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "complete" => Ok(Network::Complete),
            "grid" => Ok(Network::Grid),
            "cycle" => Ok(Network::Cycle),
            "alldata" => Ok(Network::AllData),
            other => Err(Error::Config(format!(
                "unknown network '{other}' (valid: complete, grid, cycle, alldata)"
            ))),
        }
    }
}

fn default_networks() -> Vec<Network> {
    vec![Network::Complete, Network::Grid, Network::Cycle, Network::AllData]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_networks")]
    pub networks: Vec<Network>,
    pub schedules: Vec<Schedule>,
    pub horizons: Vec<usize>,
    pub reps: usize,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub nhat: usize,
    #[serde(default)]
    pub sampling: FeatureSampling,
    pub seed: u64,
    /// `L`; the logistic loss uses it as the feature-norm bound.
    pub lipschitz: f64,
    pub beta: f64,
    /// Defaults to `2L` (so `sigma^2 = 4L^2`).
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Defaults to `L`.
    #[serde(default)]
    pub kappa: Option<f64>,
    pub erm_tolerance: f64,
    pub erm_max_iter: usize,
    /// Write measured wall-clock times; otherwise `runtime_ms` is 0 so reruns
    /// are byte-identical.
    #[serde(default)]
    pub record_timing: bool,
}

impl SweepConfig {
    /// n = 9, d = 20, 15 horizons over `10^2..10^5`, 10 replications.
    pub fn desk() -> Self {
        SweepConfig {
            networks: default_networks(),
            schedules: Schedule::ALL.to_vec(),
            horizons: log_spaced_horizons(2.0, 5.0, 15),
            reps: 10,
            n: 9,
            m: 2,
            d: 20,
            nhat: 1000,
            sampling: FeatureSampling::Ball,
            seed: 20_190_101,
            lipschitz: 1.0,
            beta: 0.25,
            sigma: None,
            kappa: None,
            erm_tolerance: ERM_TOLERANCE,
            erm_max_iter: ERM_MAX_ITER,
            record_timing: false,
        }
    }

    /// n = 100, d = 100, 15 horizons over `10^2..10^6.5`, 4 replications.
    pub fn full() -> Self {
        SweepConfig { horizons: log_spaced_horizons(2.0, 6.5, 15), reps: 4, n: 100, d: 100, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.networks.is_empty() || self.schedules.is_empty() || self.horizons.is_empty() {
            return Err(Error::Config("sweep needs at least one network, schedule and horizon".into()));
        }
        if self.horizons.contains(&0) {
            return Err(Error::Config("horizons must be >= 1".into()));
        }
        if self.reps == 0 || self.n == 0 || self.m == 0 || self.d == 0 || self.nhat == 0 {
            return Err(Error::Config("reps, n, m, d and nhat must be >= 1".into()));
        }
        if self.networks.contains(&Network::Grid) && (self.n as f64).sqrt().round().powi(2) as usize != self.n {
            return Err(Error::NonSquareGrid(self.n));
        }
        self.constants(1.0).validate()
    }

    /// Problem constants with `G` set from the reference solution.
    pub fn constants(&self, g: f64) -> ProblemConstants {
        ProblemConstants {
            lipschitz: self.lipschitz,
            beta: Some(self.beta),
            g,
            sigma: self.sigma.unwrap_or(2.0 * self.lipschitz),
            kappa: self.kappa.unwrap_or(self.lipschitz),
            b: None,
            c_lower: None,
            d: None,
            c: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub topology: Network,
    pub n: usize,
    pub m: usize,
    pub schedule: Schedule,
    pub t: usize,
    pub rep: usize,
    pub risk: f64,
    pub runtime_ms: u64,
    pub seed: u64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub topology: Network,
    pub schedule: Schedule,
    pub t: usize,
    pub rep: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub rep: usize,
    pub seed: u64,
    pub g: f64,
    pub erm_grad_norm: f64,
    pub erm_iterations: usize,
    pub erm_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub records: Vec<ExperimentRecord>,
    pub failures: Vec<CellFailure>,
    pub tasks: Vec<TaskSummary>,
}

/// Mean risk and standard error for one curve point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: usize,
    pub mean: f64,
    pub stderr: f64,
}

impl SweepResult {
    /// Risk curve over horizons for one `(network, schedule)`, averaged over
    /// replications.
    pub fn curve(&self, network: Network, schedule: Schedule) -> Vec<CurvePoint> {
        let mut by_t: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.topology == network && r.schedule == schedule) {
            by_t.entry(r.t).or_default().push(r.risk);
        }
        by_t.into_iter()
            .map(|(t, risks)| {
                let (mean, stderr) = mean_stderr(&risks);
                CurvePoint { t, mean, stderr }
            })
            .collect()
    }

    /// CSV with columns `topology,n,m,schedule,t,rep,risk,runtime_ms,seed,eta`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

const TASK_DOMAIN: u64 = 0;
const RUN_DOMAIN: u64 = 1;

struct Prepared {
    task: SyntheticTask,
    pooled: Dataset,
    g: f64,
}

/// Runs every `(network, schedule, horizon, replication)` cell. Each
/// replication draws one task shared by all its cells; the step size of each
/// cell is computed from its schedule at that horizon.
pub fn risk_sweep(config: &SweepConfig) -> Result<SweepResult> {
    config.validate()?;
    let loss = Loss::Logistic { feature_bound: config.lipschitz };
    let prepared = (0..config.reps)
        .into_par_iter()
        .map(|rep| -> Result<(Prepared, TaskSummary)> {
            let seed = derive_seed(config.seed, &[TASK_DOMAIN, rep as u64]);
            let task = generate_task(config.d, config.n, config.m, config.nhat, seed, config.sampling)?;
            let erm = erm_reference(&loss, task.train.all(), config.erm_tolerance, config.erm_max_iter)?;
            let summary = TaskSummary {
                rep,
                seed,
                g: erm.g,
                erm_grad_norm: erm.grad_norm,
                erm_iterations: erm.iterations,
                erm_converged: erm.converged,
            };
            let pooled = task.train.pooled();
            Ok((Prepared { task, pooled, g: erm.g }, summary))
        })
        .collect::<Result<Vec<_>>>()?;
    let (prepared, tasks): (Vec<Prepared>, Vec<TaskSummary>) = prepared.into_iter().unzip();

    let mut mixings: BTreeMap<Network, MixingMatrix> = BTreeMap::new();
    for &net in &config.networks {
        let p = match net.topology() {
            Some(kind) => mixing_matrix(&build_graph(kind, config.n, None)?)?,
            None => mixing_matrix(&build_graph(Topology::Complete, 1, None)?)?,
        };
        mixings.insert(net, p);
    }

    let mut cells = Vec::new();
    for &net in &config.networks {
        for &schedule in &config.schedules {
            for (hi, &t) in config.horizons.iter().enumerate() {
                for rep in 0..config.reps {
                    cells.push((net, schedule, hi, t, rep));
                }
            }
        }
    }
    // Longest runs first keeps the pool busy.
    cells.sort_by_key(|&(net, schedule, hi, t, rep)| (std::cmp::Reverse(t), net, schedule, hi, rep));

    let outcomes: Vec<std::result::Result<ExperimentRecord, CellFailure>> = cells
        .par_iter()
        .map(|&(net, schedule, hi, t, rep)| {
            let p = &mixings[&net];
            let prep = &prepared[rep];
            let (data, n_eff, m_eff) = match net {
                Network::AllData => (&prep.pooled, 1, config.n * config.m),
                _ => (&prep.task.train, config.n, config.m),
            };
            let seed = derive_seed(config.seed, &[RUN_DOMAIN, net.id(), schedule as u64, hi as u64, rep as u64]);
            let started = Instant::now();
            let result = (|| -> Result<(f64, f64)> {
                let consts = config.constants(prep.g);
                let eta = step_size(Regime::Smooth, schedule, t, n_eff, m_eff, p.gap(), &consts)?;
                let run = RunConfig::new(p, data, &loss, eta, t, seed).with_recording(Recording::Every(t));
                let trace = dsgd_run(&run)?;
                Ok((eta, out_of_sample_risk(&loss, &prep.task.pool, &trace.ergodic)))
            })();
            let runtime_ms = if config.record_timing { started.elapsed().as_millis() as u64 } else { 0 };
            match result {
                Ok((eta, risk)) => Ok(ExperimentRecord {
                    topology: net,
                    n: n_eff,
                    m: m_eff,
                    schedule,
                    t,
                    rep,
                    risk,
                    runtime_ms,
                    seed,
                    eta,
                }),
                Err(e) => Err(CellFailure { topology: net, schedule, t, rep, error: e.to_string() }),
            }
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => records.push(r),
            Err(f) => failures.push(f),
        }
    }
    records.sort_by_key(|r| (r.topology, r.schedule, r.t, r.rep));
    failures.sort_by_key(|r| (r.topology, r.schedule, r.t, r.rep));
    Ok(SweepResult { records, failures, tasks })
}

/// `rho` the smooth schedule would use, for logging alongside a record.
pub fn record_rho(config: &SweepConfig, record: &ExperimentRecord, gap: f64, g: f64) -> Result<f64> {
    rho_for(record.schedule, record.t, record.n, record.m, gap, &config.constants(g))
}

/// Largest number of index sequences the oracle will enumerate.
pub const ORACLE_CAP: u128 = 4096;

/// A tiny instance: fixed data, one replacement observation per `(w, k)`.
#[derive(Debug, Clone)]
pub struct OracleConfig<'a> {
    pub mixing: &'a MixingMatrix,
    pub data: &'a Dataset,
    pub loss: &'a Loss,
    pub eta: f64,
    pub horizon: usize,
    pub variant: Variant,
    /// `replacements[w * m + k]` replaces observation `(w, k)`.
    pub replacements: &'a [Observation],
}

/// Expectations over the sampled indices, conditional on the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleExpectations {
    /// `E δ(w,k)_v^t`, indexed `[w * m + k][v]`.
    pub delta: Vec<Vec<f64>>,
    /// `(1/nm) sum_{w,k} E[ℓ(X_v^t, Z̃_{w,k}) - ℓ(X̃(w,k)_v^t, Z̃_{w,k})]`, per node.
    pub gen_gap: Vec<f64>,
    /// `E R(X̄^t)`, the training risk of the network average.
    pub average_risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub sequences: u128,
    pub exact: OracleExpectations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloResult {
    pub reps: usize,
    pub mean: OracleExpectations,
    pub stderr: OracleExpectations,
}

impl OracleConfig<'_> {
    fn validate(&self) -> Result<()> {
        let (n, m) = (self.data.n(), self.data.m());
        if self.mixing.n() != n {
            return Err(Error::param("dataset and mixing matrix disagree on node count"));
        }
        if self.replacements.len() != n * m {
            return Err(Error::param(format!("need {} replacement observations, got {}", n * m, self.replacements.len())));
        }
        if self.horizon == 0 {
            return Err(Error::param("horizon must be >= 1"));
        }
        Ok(())
    }

    fn sequence_count(&self) -> Result<u128> {
        let (n, m) = (self.data.n() as u128, self.data.m() as u128);
        let exponent = n * (self.horizon as u128 - 1);
        let too_large = Error::StateSpaceTooLarge { size: u128::MAX, cap: ORACLE_CAP };
        let exp = u32::try_from(exponent).map_err(|_| too_large)?;
        let size = m.checked_pow(exp).unwrap_or(u128::MAX);
        if size > ORACLE_CAP {
            return Err(Error::StateSpaceTooLarge { size, cap: ORACLE_CAP });
        }
        Ok(size)
    }

    fn step(&self, data: &Dataset, state: &[Vec<f64>], indices: &[usize]) -> Result<Vec<Vec<f64>>> {
        match self.variant {
            Variant::Standard => dsgd_step(self.mixing, data, self.loss, self.eta, state, indices),
            Variant::Projected { radius } => projected_dsgd_step(self.mixing, data, self.loss, self.eta, state, indices, radius),
            Variant::Nedic => nedic_step(self.mixing, data, self.loss, self.eta, state, indices),
        }
    }

    /// All quantities for one realisation, given `X^t` on the original data
    /// and on every perturbed dataset.
    fn quantities(&self, original: &[Vec<f64>], perturbed: &[Vec<Vec<f64>>]) -> OracleExpectations {
        let n = original.len();
        let pairs = perturbed.len();
        let delta = perturbed
            .iter()
            .map(|xt| (0..n).map(|v| dist(&original[v], &xt[v])).collect())
            .collect();
        let gen_gap = (0..n)
            .map(|v| {
                perturbed
                    .iter()
                    .zip(self.replacements)
                    .map(|(xt, z)| self.loss.value(&original[v], z) - self.loss.value(&xt[v], z))
                    .sum::<f64>()
                    / pairs as f64
            })
            .collect();
        let d = original[0].len();
        let avg: Vec<f64> = (0..d).map(|j| original.iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
        OracleExpectations { delta, gen_gap, average_risk: self.loss.risk(&avg, self.data.all()) }
    }

    fn perturbed_datasets(&self) -> Result<Vec<Dataset>> {
        let m = self.data.m();
        self.replacements
            .iter()
            .enumerate()
            .map(|(i, z)| self.data.with_replacement(i / m, i % m, z.clone()))
            .collect()
    }
}

fn add_scaled(acc: &mut OracleExpectations, x: &OracleExpectations, weight: f64) {
    acc.delta.iter_mut().flatten().zip(x.delta.iter().flatten()).for_each(|(a, b)| *a += weight * b);
    acc.gen_gap.iter_mut().zip(&x.gen_gap).for_each(|(a, b)| *a += weight * b);
    acc.average_risk += weight * x.average_risk;
}

fn zeros_like(x: &OracleExpectations) -> OracleExpectations {
    OracleExpectations {
        delta: x.delta.iter().map(|r| vec![0.0; r.len()]).collect(),
        gen_gap: vec![0.0; x.gen_gap.len()],
        average_risk: 0.0,
    }
}

/// Enumerates every sequence of sampled indices `K^2..K^t` (each with
/// probability `m^{-n(t-1)}`) through the single-step functions and returns
/// exact expectations.
pub fn brute_force_oracle(config: &OracleConfig<'_>) -> Result<OracleResult> {
    config.validate()?;
    let sequences = config.sequence_count()?;
    let (n, m, d) = (config.data.n(), config.data.m(), config.data.dim());
    let t = config.horizon;
    let perturbed_data = config.perturbed_datasets()?;
    let weight = 1.0 / sequences as f64;
    let mut exact: Option<OracleExpectations> = None;
    let mut indices = vec![0usize; n];
    for q in 0..sequences {
        let mut x = vec![vec![0.0; d]; n];
        let mut xs = vec![vec![vec![0.0; d]; n]; perturbed_data.len()];
        let mut code = q;
        for _round in 2..=t {
            for k in indices.iter_mut() {
                *k = (code % m as u128) as usize;
                code /= m as u128;
            }
            x = config.step(config.data, &x, &indices)?;
            for (state, data) in xs.iter_mut().zip(&perturbed_data) {
                *state = config.step(data, state, &indices)?;
            }
        }
        let sample = config.quantities(&x, &xs);
        let acc = exact.get_or_insert_with(|| zeros_like(&sample));
        add_scaled(acc, &sample, weight);
    }
    Ok(OracleResult { sequences, exact: exact.expect("at least one sequence") })
}

/// The oracle's quantities estimated by sampling indices with the engine's
/// own generator, `reps` independent seeds.
pub fn monte_carlo_oracle(config: &OracleConfig<'_>, reps: usize, seed: u64) -> Result<MonteCarloResult> {
    config.validate()?;
    if reps < 2 {
        return Err(Error::param("need at least 2 replications"));
    }
    let perturbed_data = config.perturbed_datasets()?;
    let t = config.horizon;
    let samples = (0..reps)
        .into_par_iter()
        .map(|r| -> Result<OracleExpectations> {
            let run_seed = derive_seed(seed, &[r as u64]);
            let final_state = |data: &Dataset| -> Result<Vec<Vec<f64>>> {
                let run = RunConfig::new(config.mixing, data, config.loss, config.eta, t, run_seed)
                    .with_variant(config.variant)
                    .with_recording(Recording::Every(t));
                let mut sim = Dsgd::new(run)?;
                for _ in 1..t {
                    sim.step()?;
                }
                Ok(sim.iterates())
            };
            let x = final_state(config.data)?;
            let xs = perturbed_data.iter().map(final_state).collect::<Result<Vec<_>>>()?;
            Ok(config.quantities(&x, &xs))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = zeros_like(&samples[0]);
    let mut stderr = zeros_like(&samples[0]);
    let stat = |f: &dyn Fn(&OracleExpectations) -> f64| mean_stderr(&samples.iter().map(f).collect::<Vec<_>>());
    for (i, row) in samples[0].delta.iter().enumerate() {
        for v in 0..row.len() {
            (mean.delta[i][v], stderr.delta[i][v]) = stat(&|s| s.delta[i][v]);
        }
    }
    for v in 0..mean.gen_gap.len() {
        (mean.gen_gap[v], stderr.gen_gap[v]) = stat(&|s| s.gen_gap[v]);
    }
    (mean.average_risk, stderr.average_risk) = stat(&|s| s.average_risk);
    Ok(MonteCarloResult { reps, mean, stderr })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralRow {
    pub family: Topology,
    pub n: usize,
    pub sigma2: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub rows: Vec<SpectralRow>,
    /// Least-squares slope of `log gap` against `log n`, per family with at
    /// least two sizes.
    pub slopes: BTreeMap<Topology, f64>,
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

pub fn spectral_scaling(ns: &[usize], families: &[Topology]) -> Result<ScalingTable> {
    let mut rows = Vec::new();
    let mut slopes = BTreeMap::new();
    for &family in families {
        let mut family_rows = Vec::new();
        for &n in ns {
            let p = mixing_matrix(&build_graph(family, n, None)?)?;
            family_rows.push(SpectralRow { family, n, sigma2: p.sigma2(), gap: p.gap() });
        }
        if family_rows.len() >= 2 {
            let xs: Vec<f64> = family_rows.iter().map(|r| (r.n as f64).ln()).collect();
            let ys: Vec<f64> = family_rows.iter().map(|r| r.gap.ln()).collect();
            slopes.insert(family, fit_slope(&xs, &ys));
        }
        rows.extend(family_rows);
    }
    Ok(ScalingTable { rows, slopes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tasks_are_reproducible_and_consistent() {
        let a = generate_task(5, 3, 2, 50, 4, FeatureSampling::Ball).unwrap();
        let b = generate_task(5, 3, 2, 50, 4, FeatureSampling::Ball).unwrap();
        assert_eq!(a, b);
        for z in a.train.all().iter().chain(&a.pool) {
            assert!(z.label * dot(&z.features, &a.generator.truth) >= 0.0);
            assert!(norm(&z.features) <= 1.0 + 1e-12);
        }
        assert_ne!(a, generate_task(5, 3, 2, 50, 5, FeatureSampling::Ball).unwrap());
    }

    #[test]
    fn erm_symmetric_conflict_is_zero() {
        let data = vec![Observation::new(vec![0.5], 1.0), Observation::new(vec![0.5], -1.0)];
        let erm = erm_reference(&Loss::logistic(), &data, 1e-12, 100).unwrap();
        assert!(erm.converged);
        assert_eq!(erm.x, vec![0.0]);
    }

    #[test]
    fn erm_reaches_tolerance_on_overlapping_data() {
        // Each axis carries labels in a 2:1 ratio, so the minimiser sets the
        // sigmoid of each margin to 2/3: x = (ln 2, -ln 2).
        let e1 = || vec![1.0, 0.0];
        let e2 = || vec![0.0, 1.0];
        let data = vec![
            Observation::new(e1(), 1.0),
            Observation::new(e1(), 1.0),
            Observation::new(e1(), -1.0),
            Observation::new(e2(), 1.0),
            Observation::new(e2(), -1.0),
            Observation::new(e2(), -1.0),
        ];
        let erm = erm_reference(&Loss::logistic(), &data, 1e-10, 1_000_000).unwrap();
        assert!(erm.converged && erm.grad_norm <= 1e-10, "{erm:?}");
        let ln2 = std::f64::consts::LN_2;
        assert!((erm.x[0] - ln2).abs() < 1e-9 && (erm.x[1] + ln2).abs() < 1e-9);
        assert_relative_eq!(erm.g, 2f64.sqrt() * ln2, max_relative = 1e-9);
    }

    #[test]
    fn erm_cap_on_separable_data() {
        let task = generate_task(4, 2, 2, 10, 1, FeatureSampling::Ball).unwrap();
        let loss = Loss::logistic();
        let erm = erm_reference(&loss, task.train.all(), 1e-10, 2000).unwrap();
        assert!(!erm.converged);
        assert_eq!(erm.iterations, 2000);
        assert!(loss.risk(&erm.x, &task.pool) <= std::f64::consts::LN_2);
    }

    #[test]
    fn risk_at_zero_is_log_two() {
        let task = generate_task(3, 1, 2, 20, 2, FeatureSampling::Sphere).unwrap();
        let zeros = vec![vec![0.0; 3]; 4];
        assert_relative_eq!(out_of_sample_risk(&Loss::logistic(), &task.pool, &zeros), std::f64::consts::LN_2);
    }

    #[test]
    fn horizons_grid() {
        let h = log_spaced_horizons(2.0, 5.0, 15);
        assert_eq!(h.len(), 15);
        assert_eq!(h[0], 100);
        assert_eq!(h[14], 100_000);
        assert!(h.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(log_spaced_horizons(2.0, 6.5, 15)[14], 3_162_278);
    }

    #[test]
    fn small_sweep_is_deterministic() {
        let cfg = SweepConfig {
            horizons: vec![10, 30],
            reps: 2,
            n: 4,
            d: 3,
            nhat: 50,
            erm_max_iter: 500,
            ..SweepConfig::desk()
        };
        let a = risk_sweep(&cfg).unwrap();
        let b = risk_sweep(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.failures.is_empty());
        assert_eq!(a.records.len(), 4 * 3 * 2 * 2);
        assert!(a.records.iter().all(|r| r.risk >= 0.0 && r.runtime_ms == 0));
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("topology,n,m,schedule,t,rep,risk,runtime_ms,seed,eta\ncomplete,4,2,star,10,0,"));
        let alldata = a.records.iter().find(|r| r.topology == Network::AllData).unwrap();
        assert_eq!((alldata.n, alldata.m), (1, 8));
        // The logged step size is the schedule's value at that horizon.
        let g = a.tasks[alldata.rep].g;
        let eta = step_size(Regime::Smooth, alldata.schedule, alldata.t, 1, 8, 1.0, &cfg.constants(g)).unwrap();
        assert_eq!(alldata.eta, eta);
    }

    #[test]
    fn oracle_horizon_one_is_zero() {
        let task = generate_task(2, 2, 2, 10, 3, FeatureSampling::Ball).unwrap();
        let p = mixing_matrix(&build_graph(Topology::Complete, 2, None).unwrap()).unwrap();
        let repl = task.pool[..4].to_vec();
        let loss = Loss::logistic();
        let cfg = OracleConfig {
            mixing: &p,
            data: &task.train,
            loss: &loss,
            eta: 0.5,
            horizon: 1,
            variant: Variant::Standard,
            replacements: &repl,
        };
        let res = brute_force_oracle(&cfg).unwrap();
        assert_eq!(res.sequences, 1);
        assert!(res.exact.delta.iter().flatten().all(|&d| d == 0.0));
        assert!(res.exact.gen_gap.iter().all(|&d| d == 0.0));
        assert_relative_eq!(res.exact.average_risk, std::f64::consts::LN_2);
        let too_long = OracleConfig { horizon: 8, ..cfg.clone() };
        assert!(matches!(brute_force_oracle(&too_long), Err(Error::StateSpaceTooLarge { size: 16384, .. })));
        let three = OracleConfig { horizon: 3, ..cfg };
        assert_eq!(brute_force_oracle(&three).unwrap().sequences, 16);
    }

    #[test]
    fn spectral_slopes() {
        let table = spectral_scaling(&[9, 16, 36, 64], &[Topology::Grid, Topology::Complete]).unwrap();
        assert!((table.slopes[&Topology::Grid] + 0.96).abs() < 0.05);
        assert!(table.slopes[&Topology::Complete].abs() < 1e-9);
        assert_eq!(table.rows.len(), 8);
    }
}
