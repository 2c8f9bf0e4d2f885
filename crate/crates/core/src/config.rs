//! TOML experiment configuration. Unknown keys are rejected so typos in an
//! experiment definition fail loudly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::FeatureSampling;
use crate::engine::{Recording, Variant};
use crate::error::{Error, Result};
use crate::experiments::{log_spaced_horizons, Network, SweepConfig};
use crate::graph::{build_graph, Graph, Topology};
use crate::loss::Loss;
use crate::schedules::{ProblemConstants, Regime, Schedule};
use crate::stability::DataMode;

/// Seed used when neither the config nor the command line sets one.
pub const DEFAULT_SEED: u64 = 20_190_101;

/// Reference for every config key, shown by `--help`.
pub const CONFIG_KEYS: &str = "\
Config files are TOML. Every section is optional; unknown keys are errors.

  seed = <int>                       master seed (default 20190101)

  [graph]
    family = cycle|grid|complete|custom   (default cycle)
    n = <int>                        node count (default 9)
    edges = <path>                   edge list for family = custom

  [data]
    d = <int>                        feature dimension (default 20)
    m = <int>                        observations per node (default 2)
    nhat = <int>                     out-of-sample pool size (default 1000)
    sampling = ball|sphere           feature distribution (default ball)

  [loss]
    kind = logistic|hinge            (default logistic)
    feature_bound = <float>          bound on feature norms (default 1)
    gamma = <float>                  add (gamma/2)|x|^2 (Tikhonov)
    radius = <float>                 radius on which the Tikhonov constants hold

  [run]
    t = <int>                        horizon (default 100)
    eta = <float>                    fixed step size, or
    schedule = star|opt|test         step size from a schedule at horizon t
    regime = smooth|nonsmooth        schedule family (default from the loss)
    variant = standard|projected|nedic
    radius = <float>                 projection radius for variant = projected
    stride = <int>                   record every stride-th round
    log_points = <int>               or about this many log-spaced rounds
    parallel = <bool>                per-node parallelism (same output)

  [constants]                        overrides for schedules and bounds
    L, beta, G, sigma, kappa, B, C, D, c = <float>
    (defaults: L, beta, B, C, D from the loss; sigma = 2L; kappa = L;
     G = norm of the empirical risk minimiser; c = 1)

  [sweep]
    preset = desk|full               base values (default desk)
    networks = [complete, grid, cycle, alldata]
    schedules = [star, opt, test]
    horizons = [<int>, ...]          or
    horizon_exponents = [lo, hi, count]   log10-spaced horizons
    reps, n, m, d, nhat = <int>
    sampling = ball|sphere
    lipschitz, beta, sigma, kappa = <float>
    erm_tolerance = <float>, erm_max_iter = <int>
    record_timing = <bool>           write wall-clock runtime_ms (not byte-stable)

  [stability]
    pairs = [[w, k], ...]            perturbed observations (default [[0, 0]])
    reps = <int>                     coupled replications per pair (default 200)
    data_mode = redraw|fixed         (default redraw)
    strongly_convex = <bool>         pair with the strongly convex bound
    population_samples = <int>       fresh draws for the direct gap estimate
    gen_pairs = <int>                pairs per replication for the gap estimate
    gen_reps = <int>                 replications for the gap estimate
    exhaustive = <bool>              enumerate all pairs (n m <= 16)

  [oracle]
    mc_reps = <int>                  Monte Carlo replications (default 10000)
";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    pub family: Topology,
    pub n: usize,
    pub edges: Option<PathBuf>,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection { family: Topology::Cycle, n: 9, edges: None }
    }
}

impl GraphSection {
    pub fn build(&self) -> Result<Graph> {
        match (self.family, &self.edges) {
            (Topology::Custom, Some(path)) => {
                let g = Graph::load_edge_list(path)?;
                if g.n() != self.n {
                    return Err(Error::Config(format!("edge list has {} nodes but graph.n = {}", g.n(), self.n)));
                }
                Ok(g)
            }
            (Topology::Custom, None) => Err(Error::Config("graph.family = custom needs graph.edges".into())),
            (_, Some(_)) => Err(Error::Config("graph.edges is only used with family = custom".into())),
            (family, None) => build_graph(family, self.n, None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub d: usize,
    pub m: usize,
    pub nhat: usize,
    pub sampling: FeatureSampling,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { d: 20, m: 2, nhat: 1000, sampling: FeatureSampling::Ball }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Logistic,
    Hinge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub kind: LossKind,
    pub feature_bound: f64,
    pub gamma: Option<f64>,
    pub radius: Option<f64>,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection { kind: LossKind::Logistic, feature_bound: 1.0, gamma: None, radius: None }
    }
}

impl LossSection {
    pub fn build(&self) -> Result<Loss> {
        if !(self.feature_bound > 0.0) {
            return Err(Error::Config("loss.feature_bound must be > 0".into()));
        }
        let base = match self.kind {
            LossKind::Logistic => Loss::Logistic { feature_bound: self.feature_bound },
            LossKind::Hinge => Loss::Hinge { feature_bound: self.feature_bound },
        };
        match (self.gamma, self.radius) {
            (None, None) => Ok(base),
            (Some(gamma), Some(radius)) => Loss::tikhonov(base, gamma, radius),
            _ => Err(Error::Config("loss.gamma and loss.radius must be given together".into())),
        }
    }

    pub fn default_regime(&self) -> Regime {
        match self.kind {
            LossKind::Logistic => Regime::Smooth,
            LossKind::Hinge => Regime::Nonsmooth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantName {
    #[default]
    Standard,
    Projected,
    Nedic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub t: usize,
    pub eta: Option<f64>,
    pub schedule: Option<Schedule>,
    pub regime: Option<Regime>,
    pub variant: VariantName,
    pub radius: Option<f64>,
    pub stride: Option<usize>,
    pub log_points: Option<usize>,
    pub parallel: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            t: 100,
            eta: None,
            schedule: None,
            regime: None,
            variant: VariantName::Standard,
            radius: None,
            stride: None,
            log_points: None,
            parallel: false,
        }
    }
}

impl RunSection {
    pub fn variant(&self) -> Result<Variant> {
        match (self.variant, self.radius) {
            (VariantName::Standard, None) => Ok(Variant::Standard),
            (VariantName::Nedic, None) => Ok(Variant::Nedic),
            (VariantName::Projected, Some(radius)) => Ok(Variant::Projected { radius }),
            (VariantName::Projected, None) => Err(Error::Config("variant = projected needs run.radius".into())),
            (_, Some(_)) => Err(Error::Config("run.radius is only used with variant = projected".into())),
        }
    }

    pub fn recording(&self) -> Result<Recording> {
        match (self.stride, self.log_points) {
            (None, None) => Ok(Recording::auto(self.t)),
            (Some(k), None) if k > 0 => Ok(Recording::Every(k)),
            (None, Some(c)) if c > 0 => Ok(Recording::LogSpaced(c)),
            (Some(_), Some(_)) => Err(Error::Config("set at most one of run.stride and run.log_points".into())),
            _ => Err(Error::Config("run.stride and run.log_points must be positive".into())),
        }
    }
}

/// Optional overrides of the problem constants.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsSection {
    #[serde(rename = "L")]
    pub lipschitz: Option<f64>,
    pub beta: Option<f64>,
    #[serde(rename = "G")]
    pub g: Option<f64>,
    pub sigma: Option<f64>,
    pub kappa: Option<f64>,
    #[serde(rename = "B")]
    pub b: Option<f64>,
    #[serde(rename = "C")]
    pub c_lower: Option<f64>,
    #[serde(rename = "D")]
    pub d: Option<f64>,
    pub c: Option<f64>,
}

impl ConstantsSection {
    /// Fills unset constants from the loss; `g` supplies `G` when not set.
    pub fn resolve(&self, loss: &Loss, g: impl FnOnce() -> Result<f64>) -> Result<ProblemConstants> {
        let lc = loss.constants();
        let lipschitz = self.lipschitz.unwrap_or(lc.lipschitz);
        let consts = ProblemConstants {
            lipschitz,
            beta: self.beta.or(lc.smoothness),
            g: match self.g {
                Some(g) => g,
                None => g()?,
            },
            sigma: self.sigma.unwrap_or(2.0 * lipschitz),
            kappa: self.kappa.unwrap_or(lipschitz),
            b: self.b.or(Some(lc.upper_at_zero)),
            c_lower: self.c_lower.or(Some(lc.lower_bound)),
            d: self.d.or(lc.rademacher),
            c: self.c.unwrap_or(1.0),
        };
        consts.validate()?;
        Ok(consts)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub preset: Option<String>,
    pub networks: Option<Vec<Network>>,
    pub schedules: Option<Vec<Schedule>>,
    pub horizons: Option<Vec<usize>>,
    pub horizon_exponents: Option<(f64, f64, usize)>,
    pub reps: Option<usize>,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub d: Option<usize>,
    pub nhat: Option<usize>,
    pub sampling: Option<FeatureSampling>,
    pub lipschitz: Option<f64>,
    pub beta: Option<f64>,
    pub sigma: Option<f64>,
    pub kappa: Option<f64>,
    pub erm_tolerance: Option<f64>,
    pub erm_max_iter: Option<usize>,
    pub record_timing: Option<bool>,
}

impl SweepSection {
    pub fn resolve(&self, seed: u64) -> Result<SweepConfig> {
        let mut c = match self.preset.as_deref().unwrap_or("desk") {
            "desk" => SweepConfig::desk(),
            "full" => SweepConfig::full(),
            other => return Err(Error::Config(format!("unknown sweep preset '{other}' (valid: desk, full)"))),
        };
        c.seed = seed;
        macro_rules! take {
            ($($field:ident),*) => { $(if let Some(v) = self.$field.clone() { c.$field = v; })* };
        }
        take!(networks, schedules, horizons, reps, n, m, d, nhat, sampling, lipschitz, beta, erm_tolerance, erm_max_iter, record_timing);
        if self.sigma.is_some() {
            c.sigma = self.sigma;
        }
        if self.kappa.is_some() {
            c.kappa = self.kappa;
        }
        match (&self.horizons, self.horizon_exponents) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("set at most one of sweep.horizons and sweep.horizon_exponents".into()))
            }
            (None, Some((lo, hi, count))) => c.horizons = log_spaced_horizons(lo, hi, count),
            _ => {}
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilitySection {
    pub pairs: Vec<(usize, usize)>,
    pub reps: usize,
    pub data_mode: DataMode,
    pub strongly_convex: bool,
    pub population_samples: usize,
    pub gen_pairs: usize,
    pub gen_reps: usize,
    pub exhaustive: bool,
}

impl Default for StabilitySection {
    fn default() -> Self {
        StabilitySection {
            pairs: vec![(0, 0)],
            reps: 200,
            data_mode: DataMode::Redraw,
            strongly_convex: false,
            population_samples: 10_000,
            gen_pairs: 4,
            gen_reps: 50,
            exhaustive: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub mc_reps: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection { mc_reps: 10_000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: Option<u64>,
    pub graph: GraphSection,
    pub data: DataSection,
    pub loss: LossSection,
    pub run: RunSection,
    pub constants: ConstantsSection,
    pub sweep: SweepSection,
    pub stability: StabilitySection,
    pub oracle: OracleSection,
}

/// What a command wrote next to its outputs, sufficient to rerun it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: Config,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<ProblemConstants>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<serde_json::Value>,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML config, or the `config` of a JSON manifest written by an
    /// earlier command.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: Manifest =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            return Ok(manifest.config);
        }
        Config::from_toml(&text)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }
}
