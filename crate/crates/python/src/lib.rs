//! Python bindings: graphs, losses, single runs, schedules, bounds,
//! stability estimates, the enumeration oracle, sweeps and the CLI.

use std::collections::BTreeMap;

use dsgd_core::bounds::{self, Convexity};
use dsgd_core::config::Config;
use dsgd_core::data::{DataGenerator, Dataset, FeatureSampling};
use dsgd_core::engine::{dsgd_run, Recording, RunConfig, Trace, Variant};
use dsgd_core::experiments::{
    brute_force_oracle, risk_sweep, generate_task, monte_carlo_oracle, out_of_sample_risk, OracleConfig,
    SyntheticTask,
};
use dsgd_core::graph::{Graph, MixingMatrix, Topology};
use dsgd_core::loss::{Loss, Observation};
use dsgd_core::rng::derive_seed;
use dsgd_core::schedules::{self, ProblemConstants, Regime, Schedule};
use dsgd_core::stability::{stability_estimate as core_stability_estimate, StabilityConfig};
use dsgd_core::Error;
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

create_exception!(dsgd, DivergenceError, PyRuntimeError, "Iterates left the finite range.");
create_exception!(dsgd, InvariantError, PyRuntimeError, "A checked invariant does not hold.");

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Divergence { .. } => DivergenceError::new_err(e.to_string()),
        Error::InvariantViolation(_) => InvariantError::new_err(e.to_string()),
        Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::EigenNonConvergence { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn observations(features: Vec<Vec<f64>>, labels: Vec<f64>) -> PyResult<Vec<Observation>> {
    if features.len() != labels.len() {
        return Err(PyValueError::new_err(format!("{} feature rows but {} labels", features.len(), labels.len())));
    }
    Ok(features.into_iter().zip(labels).map(|(f, y)| Observation::new(f, y)).collect())
}

#[pyclass(name = "Loss", module = "dsgd", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLoss(Loss);

#[pymethods]
impl PyLoss {
    #[staticmethod]
    #[pyo3(signature = (feature_bound = 1.0))]
    fn logistic(feature_bound: f64) -> Self {
        PyLoss(Loss::Logistic { feature_bound })
    }

    #[staticmethod]
    #[pyo3(signature = (feature_bound = 1.0))]
    fn hinge(feature_bound: f64) -> Self {
        PyLoss(Loss::Hinge { feature_bound })
    }

    /// `base + (gamma/2)|x|^2`, with constants valid on the ball of `radius`.
    #[staticmethod]
    fn tikhonov(base: &PyLoss, gamma: f64, radius: f64) -> PyResult<Self> {
        Loss::tikhonov(base.0.clone(), gamma, radius).map(PyLoss).map_err(py_err)
    }

    fn value(&self, x: Vec<f64>, features: Vec<f64>, label: f64) -> f64 {
        self.0.value(&x, &Observation::new(features, label))
    }

    fn subgradient(&self, x: Vec<f64>, features: Vec<f64>, label: f64) -> Vec<f64> {
        self.0.subgradient(&x, &Observation::new(features, label))
    }

    fn risk(&self, x: Vec<f64>, features: Vec<Vec<f64>>, labels: Vec<f64>) -> PyResult<f64> {
        Ok(self.0.risk(&x, &observations(features, labels)?))
    }

    /// `L`, `beta`, `gamma`, `B`, `C` and `D`; absent constants are `None`.
    fn constants(&self) -> BTreeMap<&'static str, Option<f64>> {
        let c = self.0.constants();
        BTreeMap::from([
            ("L", Some(c.lipschitz)),
            ("beta", c.smoothness),
            ("gamma", c.strong_convexity),
            ("B", Some(c.upper_at_zero)),
            ("C", Some(c.lower_bound)),
            ("D", c.rademacher),
        ])
    }

    fn __repr__(&self) -> String {
        format!("Loss({})", self.0.name())
    }
}

#[pyclass(name = "MixingMatrix", module = "dsgd", frozen)]
struct PyMixing {
    graph: Graph,
    p: MixingMatrix,
}

#[pymethods]
impl PyMixing {
    /// `family` is cycle, grid, complete or custom; custom graphs need `edges`.
    #[new]
    #[pyo3(signature = (family, n, edges = None))]
    fn new(family: &str, n: usize, edges: Option<Vec<(usize, usize)>>) -> PyResult<Self> {
        let graph = Graph::build(parse::<Topology>(family)?, n, edges.as_deref()).map_err(py_err)?;
        let p = MixingMatrix::from_graph(&graph).map_err(py_err)?;
        Ok(PyMixing { graph, p })
    }

    #[getter]
    fn n(&self) -> usize {
        self.p.n()
    }

    #[getter]
    fn sigma2(&self) -> f64 {
        self.p.sigma2()
    }

    #[getter]
    fn gap(&self) -> f64 {
        self.p.gap()
    }

    fn to_list(&self) -> Vec<Vec<f64>> {
        let n = self.p.n();
        (0..n).map(|v| (0..n).map(|w| self.p.get(v, w)).collect()).collect()
    }

    /// Hop distances from `source`.
    fn distances(&self, source: usize) -> PyResult<Vec<Option<usize>>> {
        if source >= self.p.n() {
            return Err(PyValueError::new_err(format!("node {source} out of range")));
        }
        Ok(self.graph.distances_from(source))
    }

    fn __repr__(&self) -> String {
        format!("MixingMatrix({}, n={}, sigma2={:.6})", self.graph.kind(), self.p.n(), self.p.sigma2())
    }
}

#[pyclass(name = "Dataset", module = "dsgd", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset(Dataset);

#[pymethods]
impl PyDataset {
    /// Row `v * m + k` of `features` is observation `k` of node `v`.
    #[new]
    fn new(n: usize, m: usize, features: Vec<Vec<f64>>, labels: Vec<f64>) -> PyResult<Self> {
        Dataset::new(n, m, observations(features, labels)?).map(PyDataset).map_err(py_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn m(&self) -> usize {
        self.0.m()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        self.0.all().iter().map(|z| z.features.clone()).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<f64> {
        self.0.all().iter().map(|z| z.label).collect()
    }
}

#[pyclass(name = "Task", module = "dsgd", frozen)]
struct PyTask(SyntheticTask);

#[pymethods]
impl PyTask {
    #[getter]
    fn train(&self) -> PyDataset {
        PyDataset(self.0.train.clone())
    }

    #[getter]
    fn truth(&self) -> Vec<f64> {
        self.0.generator.truth.clone()
    }

    #[getter]
    fn pool_size(&self) -> usize {
        self.0.pool.len()
    }

    /// Out-of-sample risk on the pool, maximised over the given node iterates.
    fn risk(&self, loss: &PyLoss, iterates: Vec<Vec<f64>>) -> PyResult<f64> {
        if iterates.is_empty() {
            return Err(PyValueError::new_err("need at least one iterate"));
        }
        Ok(out_of_sample_risk(&loss.0, &self.0.pool, &iterates))
    }
}

#[pyfunction]
#[pyo3(signature = (d, n, m, nhat, seed, sampling = "ball"))]
fn generate(d: usize, n: usize, m: usize, nhat: usize, seed: u64, sampling: &str) -> PyResult<PyTask> {
    generate_task(d, n, m, nhat, seed, parse::<FeatureSampling>(sampling)?).map(PyTask).map_err(py_err)
}

#[pyclass(name = "Trace", module = "dsgd", frozen)]
struct PyTrace(Trace);

#[pymethods]
impl PyTrace {
    #[getter]
    fn horizon(&self) -> usize {
        self.0.horizon
    }

    #[getter]
    fn eta(&self) -> f64 {
        self.0.eta
    }

    /// `X_v^t`
    #[getter]
    fn final_iterates(&self) -> Vec<Vec<f64>> {
        self.0.final_iterates.clone()
    }

    /// `X_v^{t+1}`
    #[getter]
    fn next_iterates(&self) -> Vec<Vec<f64>> {
        self.0.next_iterates.clone()
    }

    /// Running mean of `X_v^1..X_v^t`.
    #[getter]
    fn ergodic(&self) -> Vec<Vec<f64>> {
        self.0.ergodic.clone()
    }

    #[getter]
    fn rounds(&self) -> Vec<usize> {
        self.0.records.iter().map(|r| r.round).collect()
    }

    /// Largest `|X_v - X̄|` at each recorded round.
    #[getter]
    fn max_deviation(&self) -> Vec<f64> {
        self.0.records.iter().map(|r| r.max_deviation()).collect()
    }

    #[getter]
    fn max_norm(&self) -> Vec<f64> {
        self.0.records.iter().map(|r| r.max_norm()).collect()
    }

    fn average_recursion_residual(&self) -> PyResult<f64> {
        self.0.average_recursion_residual().map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(py_err)
    }

    fn write_csv(&self, path: std::path::PathBuf) -> PyResult<()> {
        let file = std::fs::File::create(path).map_err(|e| py_err(e.into()))?;
        self.0.write_csv(std::io::BufWriter::new(file)).map_err(py_err)
    }
}

fn variant(name: &str, radius: Option<f64>) -> PyResult<Variant> {
    match (name, radius) {
        ("standard", None) => Ok(Variant::Standard),
        ("nedic", None) => Ok(Variant::Nedic),
        ("projected", Some(radius)) => Ok(Variant::Projected { radius }),
        _ => Err(PyValueError::new_err("variant is standard, nedic, or projected with a radius")),
    }
}

/// Runs `t` rounds of distributed SGD from zero.
#[pyfunction]
#[pyo3(signature = (mixing, data, loss, eta, t, seed, variant_name = "standard", radius = None, stride = None))]
#[allow(clippy::too_many_arguments)]
fn run(
    py: Python<'_>,
    mixing: &PyMixing,
    data: &PyDataset,
    loss: &PyLoss,
    eta: f64,
    t: usize,
    seed: u64,
    variant_name: &str,
    radius: Option<f64>,
    stride: Option<usize>,
) -> PyResult<PyTrace> {
    let v = variant(variant_name, radius)?;
    let recording = stride.map_or(Recording::auto(t), Recording::Every);
    py.detach(|| {
        let config = RunConfig::new(&mixing.p, &data.0, &loss.0, eta, t, seed).with_variant(v).with_recording(recording);
        dsgd_run(&config).map(PyTrace).map_err(py_err)
    })
}

#[allow(clippy::too_many_arguments)]
fn constants(
    lipschitz: f64,
    g: f64,
    beta: Option<f64>,
    sigma: Option<f64>,
    kappa: Option<f64>,
    b: Option<f64>,
    c_lower: Option<f64>,
    d: Option<f64>,
    c: f64,
) -> PyResult<ProblemConstants> {
    let consts = ProblemConstants {
        lipschitz,
        beta,
        g,
        sigma: sigma.unwrap_or(2.0 * lipschitz),
        kappa: kappa.unwrap_or(lipschitz),
        b,
        c_lower,
        d,
        c,
    };
    consts.validate().map_err(py_err)?;
    Ok(consts)
}

/// Step size of a tuned schedule (`star`, `opt`, `test`) at horizon `t`.
#[pyfunction]
#[pyo3(signature = (regime, schedule, t, n, m, gap, L, G, beta = None, sigma = None, kappa = None, c = 1.0))]
#[allow(non_snake_case, clippy::too_many_arguments)]
fn step_size(
    regime: &str,
    schedule: &str,
    t: usize,
    n: usize,
    m: usize,
    gap: f64,
    L: f64,
    G: f64,
    beta: Option<f64>,
    sigma: Option<f64>,
    kappa: Option<f64>,
    c: f64,
) -> PyResult<f64> {
    let consts = constants(L, G, beta, sigma, kappa, None, None, None, c)?;
    schedules::step_size(parse::<Regime>(regime)?, parse::<Schedule>(schedule)?, t, n, m, gap, &consts).map_err(py_err)
}

/// Order-of-magnitude early-stopping horizon with unit constants.
#[pyfunction]
fn horizon(regime: &str, schedule: &str, n: usize, m: usize, gap: f64) -> PyResult<usize> {
    schedules::horizon(parse::<Regime>(regime)?, parse::<Schedule>(schedule)?, n, m, gap, 1.0).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (eta, L, n, m, t))]
#[allow(non_snake_case)]
fn gen_bound_smooth(eta: f64, L: f64, n: usize, m: usize, t: usize) -> PyResult<f64> {
    bounds::gen_bound_smooth(eta, L, n, m, t).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (eta, L, B, C, D, n, m, t))]
#[allow(non_snake_case, clippy::too_many_arguments)]
fn gen_bound_nonsmooth(eta: f64, L: f64, B: f64, C: f64, D: f64, n: usize, m: usize, t: usize) -> PyResult<f64> {
    bounds::gen_bound_nonsmooth(eta, L, B, C, D, n, m, t).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (eta, L, B, C, t))]
#[allow(non_snake_case)]
fn iterate_norm_bound(eta: f64, L: f64, B: f64, C: f64, t: usize) -> PyResult<f64> {
    bounds::iterate_norm_bound(eta, L, B, C, t).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (eta, L, m, mixing, v, w, t))]
#[allow(non_snake_case)]
fn stability_bound(eta: f64, L: f64, m: usize, mixing: &PyMixing, v: usize, w: usize, t: usize) -> PyResult<f64> {
    bounds::stability_bound(eta, L, m, &mixing.p, v, w, t, Convexity::Convex).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (eta, L, kappa, n, sigma2, s))]
#[allow(non_snake_case)]
fn network_term_bound(eta: f64, L: f64, kappa: f64, n: usize, sigma2: f64, s: usize) -> PyResult<f64> {
    bounds::network_term_bound(eta, L, kappa, n, sigma2, s).map_err(py_err)
}

fn generator(seed: u64, d: usize) -> PyResult<DataGenerator> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
    DataGenerator::gaussian_truth(&mut rng, d, FeatureSampling::Ball).map_err(py_err)
}

/// Monte Carlo `E δ(w,k)_v^s` with the paired bound, over fresh data per
/// replication. Returns a dict with `rounds`, `mean`, `stderr`, `bound`.
#[pyfunction]
#[pyo3(signature = (mixing, loss, d, m, eta, t, w, k, reps, seed))]
#[allow(clippy::too_many_arguments)]
fn stability_estimate<'py>(
    py: Python<'py>,
    mixing: &PyMixing,
    loss: &PyLoss,
    d: usize,
    m: usize,
    eta: f64,
    t: usize,
    w: usize,
    k: usize,
    reps: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let gen = generator(seed, d)?;
    let e = py.detach(|| {
        let mut cfg = StabilityConfig::new(&mixing.p, &loss.0, &gen, m, eta, t, derive_seed(seed, &[1]));
        cfg.recording = Recording::Every(1);
        core_stability_estimate(&cfg, w, k, reps).map_err(py_err)
    })?;
    let out = PyDict::new(py);
    out.set_item("rounds", e.rounds)?;
    out.set_item("mean", e.mean)?;
    out.set_item("stderr", e.stderr)?;
    out.set_item("bound", e.bound)?;
    Ok(out)
}

/// Exact expectations by enumerating every index sequence, with a Monte
/// Carlo estimate of the same quantities.
#[pyfunction]
#[pyo3(signature = (mixing, loss, d, m, eta, t, seed, mc_reps = 10_000))]
#[allow(clippy::too_many_arguments)]
fn oracle<'py>(
    py: Python<'py>,
    mixing: &PyMixing,
    loss: &PyLoss,
    d: usize,
    m: usize,
    eta: f64,
    t: usize,
    seed: u64,
    mc_reps: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let gen = generator(seed, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4]));
    let data = gen.dataset(&mut rng, mixing.p.n(), m).map_err(py_err)?;
    let replacements = gen.sample(&mut rng, mixing.p.n() * m);
    let (exact, mc) = py.detach(|| -> PyResult<_> {
        let cfg = OracleConfig {
            mixing: &mixing.p,
            data: &data,
            loss: &loss.0,
            eta,
            horizon: t,
            variant: Variant::Standard,
            replacements: &replacements,
        };
        let exact = brute_force_oracle(&cfg).map_err(py_err)?;
        let mc = monte_carlo_oracle(&cfg, mc_reps, derive_seed(seed, &[4, 1])).map_err(py_err)?;
        Ok((exact, mc))
    })?;
    let out = PyDict::new(py);
    out.set_item("sequences", exact.sequences as u64)?;
    out.set_item("delta", exact.exact.delta)?;
    out.set_item("gen_gap", exact.exact.gen_gap)?;
    out.set_item("average_risk", exact.exact.average_risk)?;
    out.set_item("mc_delta", mc.mean.delta)?;
    out.set_item("mc_delta_stderr", mc.stderr.delta)?;
    out.set_item("mc_average_risk", mc.mean.average_risk)?;
    out.set_item("mc_average_risk_stderr", mc.stderr.average_risk)?;
    Ok(out)
}

/// Runs the risk sweep. `config` is TOML text with a `[sweep]` section (see
/// `dsgd --help`); returns one dict per cell.
#[pyfunction]
#[pyo3(signature = (config = "", seed = None))]
fn sweep<'py>(py: Python<'py>, config: &str, seed: Option<u64>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = Config::from_toml(config).map_err(py_err)?;
    let resolved = cfg.sweep.resolve(seed.unwrap_or_else(|| cfg.seed())).map_err(py_err)?;
    let result = py.detach(|| risk_sweep(&resolved).map_err(py_err))?;
    result
        .records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("topology", r.topology.name())?;
            d.set_item("n", r.n)?;
            d.set_item("m", r.m)?;
            d.set_item("schedule", r.schedule.to_string())?;
            d.set_item("t", r.t)?;
            d.set_item("rep", r.rep)?;
            d.set_item("risk", r.risk)?;
            d.set_item("eta", r.eta)?;
            Ok(d)
        })
        .collect()
}

/// Runs the command-line interface in-process; returns `(exit_code, stdout)`.
#[pyfunction]
fn cli(py: Python<'_>, args: Vec<String>) -> (i32, String) {
    let mut out = Vec::new();
    let code = py.detach(|| {
        dsgd_core::cli::main_with_args(std::iter::once("dsgd".to_string()).chain(args), &mut out)
    });
    (code, String::from_utf8_lossy(&out).into_owned())
}

#[pymodule]
fn dsgd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DivergenceError", m.py().get_type::<DivergenceError>())?;
    m.add("InvariantError", m.py().get_type::<InvariantError>())?;
    m.add_class::<PyLoss>()?;
    m.add_class::<PyMixing>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTask>()?;
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(step_size, m)?)?;
    m.add_function(wrap_pyfunction!(horizon, m)?)?;
    m.add_function(wrap_pyfunction!(gen_bound_smooth, m)?)?;
    m.add_function(wrap_pyfunction!(gen_bound_nonsmooth, m)?)?;
    m.add_function(wrap_pyfunction!(iterate_norm_bound, m)?)?;
    m.add_function(wrap_pyfunction!(stability_bound, m)?)?;
    m.add_function(wrap_pyfunction!(network_term_bound, m)?)?;
    m.add_function(wrap_pyfunction!(stability_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
