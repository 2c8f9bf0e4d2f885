//! Command-line front end. Tables and data go to stdout, diagnostics to
//! stderr; file-producing commands write CSVs and a `manifest.json` that can
//! be passed back through `--config` to reproduce them byte for byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bounds::{self, Convexity};
use crate::config::{Config, Manifest, CONFIG_KEYS};
use crate::data::{DataGenerator, Dataset};
use crate::engine::{dsgd_run, RunConfig, Variant};
use crate::error::{Error, Result};
use crate::experiments::{
    brute_force_oracle, erm_reference, risk_sweep, generate_task, monte_carlo_oracle, out_of_sample_risk,
    spectral_scaling, OracleConfig, ERM_MAX_ITER, ERM_TOLERANCE,
};
use crate::graph::{build_graph, mixing_matrix, Graph, MixingMatrix, Topology};
use crate::loss::Loss;
use crate::rng::derive_seed;
use crate::schedules::{self, ProblemConstants, Regime, Schedule};
use crate::stability::{
    generalisation_estimate, stability_estimate, write_stability_csv, PairSelection, StabilityConfig,
};

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "DSGD_OUT_DIR";

/// Standard errors within which Monte Carlo must match exact values.
const ORACLE_Z: f64 = 3.0;
/// Standard errors of slack allowed when comparing estimates to bounds.
const BOUND_Z: f64 = 2.0;
/// Largest allowed violation of the network-average recursion.
const RECURSION_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Parser)]
#[command(name = "dsgd", version, about = "Distributed stochastic gradient descent over communication graphs")]
#[command(after_long_help = CONFIG_KEYS)]
pub struct Cli {
    /// TOML config, or a manifest.json written by an earlier command
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for CSV and manifest outputs
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "dsgd-out")]
    pub out_dir: PathBuf,
    /// Master seed (overrides the config; default 20190101)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// More diagnostics on stderr (repeat for more)
    #[arg(long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Exit with status 4 when an invariant or statistical check fails
    #[arg(long, global = true)]
    pub check: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Second-largest singular value and spectral gap of the mixing matrix
    Spectral(SpectralArgs),
    /// Step sizes and early-stopping horizons of the tuned schedules
    Schedule(ScheduleArgs),
    /// Evaluate one of the theoretical bounds
    Bounds(BoundsArgs),
    /// Simulate one run on a synthetic logistic or hinge task
    Run(ProblemArgs),
    /// Out-of-sample risk over topologies, schedules and horizons
    Sweep,
    /// Coupled-run stability and generalisation estimates
    Stability(ProblemArgs),
    /// Exact expectations by enumeration against Monte Carlo
    Oracle(ProblemArgs),
}

#[derive(Debug, Args)]
pub struct SpectralArgs {
    /// Graph families
    #[arg(long, value_delimiter = ',', default_values_t = Topology::FAMILIES.to_vec())]
    pub family: Vec<Topology>,
    /// Node counts
    #[arg(long, value_delimiter = ',', required = true)]
    pub n: Vec<usize>,
}

#[derive(Debug, Args, Default)]
pub struct ConstantArgs {
    /// Lipschitz constant of the loss
    #[arg(long = "L")]
    pub lipschitz: Option<f64>,
    /// Smoothness constant
    #[arg(long)]
    pub beta: Option<f64>,
    /// Strong convexity constant
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Norm of the comparison point
    #[arg(long = "G")]
    pub g: Option<f64>,
    /// Gradient-noise constant (default 2L)
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Gradient-dissimilarity constant (default L)
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Upper bound of the loss at zero
    #[arg(long = "B")]
    pub b: Option<f64>,
    /// Lower bound of the loss
    #[arg(long = "C")]
    pub c_lower: Option<f64>,
    /// Rademacher constant of the loss class
    #[arg(long = "D")]
    pub d: Option<f64>,
    /// Multiplier of the centralised smooth rate
    #[arg(long = "c", default_value_t = 1.0)]
    pub c: f64,
}

impl ConstantArgs {
    fn problem(&self) -> Result<ProblemConstants> {
        let lipschitz = need(self.lipschitz, "--L")?;
        let consts = ProblemConstants {
            lipschitz,
            beta: self.beta,
            g: need(self.g, "--G")?,
            sigma: self.sigma.unwrap_or(2.0 * lipschitz),
            kappa: self.kappa.unwrap_or(lipschitz),
            b: self.b,
            c_lower: self.c_lower,
            d: self.d,
            c: self.c,
        };
        consts.validate()?;
        Ok(consts)
    }
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value = "smooth")]
    pub regime: Regime,
    /// Schedules to evaluate (default: all)
    #[arg(long, value_delimiter = ',')]
    pub schedule: Vec<Schedule>,
    /// Horizons
    #[arg(long, value_delimiter = ',', required = true)]
    pub t: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    /// Spectral gap; computed from --family and --n when omitted
    #[arg(long)]
    pub gap: Option<f64>,
    #[arg(long)]
    pub family: Option<Topology>,
    #[command(flatten)]
    pub constants: ConstantArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Lemma {
    GenSmooth,
    GenStrongly,
    GenNonsmooth,
    IterateNorm,
    Stability,
    NetworkTerm,
    OptSmooth,
    OptNonsmooth,
    TestSmooth,
    TestNonsmooth,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[arg(long, value_enum)]
    pub lemma: Lemma,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Smooth step-size parameter, eta = 1/(beta + 1/rho)
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    /// Horizon, or round for --lemma network_term
    #[arg(long)]
    pub t: Option<usize>,
    /// Observing node (stability)
    #[arg(long)]
    pub v: Option<usize>,
    /// Perturbed node (stability)
    #[arg(long)]
    pub w: Option<usize>,
    /// Second singular value; computed from --family and --n when omitted
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub family: Option<Topology>,
    /// Print the full report as JSON
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub constants: ConstantArgs,
}

/// Overrides applied on top of the config file.
#[derive(Debug, Args, Default)]
pub struct ProblemArgs {
    #[arg(long)]
    pub family: Option<Topology>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub schedule: Option<Schedule>,
}

impl ProblemArgs {
    fn apply(&self, cfg: &mut Config) {
        if let Some(f) = self.family {
            cfg.graph.family = f;
        }
        if let Some(n) = self.n {
            cfg.graph.n = n;
        }
        if let Some(m) = self.m {
            cfg.data.m = m;
        }
        if let Some(d) = self.d {
            cfg.data.d = d;
        }
        if let Some(t) = self.t {
            cfg.run.t = t;
        }
        if self.eta.is_some() {
            cfg.run.eta = self.eta;
            cfg.run.schedule = None;
        }
        if self.schedule.is_some() {
            cfg.run.schedule = self.schedule;
            cfg.run.eta = None;
        }
    }
}

fn need<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("{flag} is required")))
}

/// Exit status for an error: 2 for configuration and parameter problems,
/// 3 for divergence, 4 for failed invariants, 1 otherwise.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Divergence { .. } => 3,
        Error::InvariantViolation(_) => 4,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::EigenNonConvergence { .. } => 1,
        _ => 2,
    }
}

/// Parses arguments, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    if let Some(workers) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build_global() {
            warn!("could not size the worker pool: {e}");
        }
    }
    match run(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Spectral(a) => cmd_spectral(a, out),
        Command::Schedule(a) => cmd_schedule(a, out),
        Command::Bounds(a) => cmd_bounds(a, out),
        Command::Run(a) => cmd_run(&Context::new(cli, a)?, out),
        Command::Sweep => cmd_sweep(&Context::new(cli, &ProblemArgs::default())?, out),
        Command::Stability(a) => cmd_stability(&Context::new(cli, a)?, out),
        Command::Oracle(a) => cmd_oracle(&Context::new(cli, a)?, out),
    }
}

fn cmd_spectral(a: &SpectralArgs, out: &mut dyn Write) -> Result<()> {
    let table = spectral_scaling(&a.n, &a.family)?;
    writeln!(out, "family,n,sigma2,gap")?;
    for r in &table.rows {
        writeln!(out, "{},{},{:.6},{:.6}", r.family, r.n, r.sigma2, r.gap)?;
    }
    for (family, slope) in &table.slopes {
        info!("{family}: log-log slope of gap against n = {slope:.4}");
    }
    Ok(())
}

fn gap_from(gap: Option<f64>, family: Option<Topology>, n: usize) -> Result<f64> {
    match (gap, family) {
        (Some(g), None) => Ok(g),
        (None, Some(f)) => Ok(mixing_matrix(&build_graph(f, n, None)?)?.gap()),
        (None, None) => Err(Error::Config("give --gap or --family".into())),
        (Some(_), Some(_)) => Err(Error::Config("give only one of --gap and --family".into())),
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn cmd_schedule(a: &ScheduleArgs, out: &mut dyn Write) -> Result<()> {
    let gap = gap_from(a.gap, a.family, a.n)?;
    let consts = a.constants.problem()?;
    let list = if a.schedule.is_empty() { Schedule::ALL.to_vec() } else { a.schedule.clone() };
    writeln!(out, "regime,schedule,t,rho,eta,horizon,explicit_horizon")?;
    for &schedule in &list {
        let horizon = schedules::horizon(a.regime, schedule, a.n, a.m, gap, consts.c)?;
        let explicit = schedules::explicit_horizon(a.regime, schedule, a.n, a.m, gap, &consts).ok();
        for &t in &a.t {
            let rho = match a.regime {
                Regime::Smooth => Some(schedules::rho_for(schedule, t, a.n, a.m, gap, &consts)?),
                Regime::Nonsmooth => None,
            };
            let eta = schedules::step_size(a.regime, schedule, t, a.n, a.m, gap, &consts)?;
            writeln!(
                out,
                "{},{},{},{},{:.6},{},{}",
                a.regime,
                schedule,
                t,
                fmt_opt(rho),
                eta,
                horizon,
                explicit.map(|h| h.to_string()).unwrap_or_default()
            )?;
        }
    }
    Ok(())
}

fn cmd_bounds(a: &BoundsArgs, out: &mut dyn Write) -> Result<()> {
    let c = &a.constants;
    let sigma2 = || -> Result<f64> {
        match (a.sigma2, a.family) {
            (Some(s), None) => Ok(s),
            (None, Some(_)) => Ok(1.0 - gap_from(None, a.family, need(a.n, "--n")?)?),
            (None, None) => Err(Error::Config("give --sigma2 or --family".into())),
            (Some(_), Some(_)) => Err(Error::Config("give only one of --sigma2 and --family".into())),
        }
    };
    let eta = || need(a.eta, "--eta");
    let rho = || need(a.rho, "--rho");
    let l = || need(c.lipschitz, "--L");
    let n = || need(a.n, "--n");
    let m = || need(a.m, "--m");
    let t = || need(a.t, "--t");
    let mut inputs: Vec<(&str, f64)> = Vec::new();
    let mut note = |name: &'static str, v: f64| {
        inputs.push((name, v));
        v
    };
    let name = clap::ValueEnum::to_possible_value(&a.lemma).expect("every lemma has a name").get_name().to_owned();
    let value = match a.lemma {
        Lemma::GenSmooth => bounds::gen_bound_smooth(
            note("eta", eta()?),
            note("L", l()?),
            note("n", n()? as f64) as usize,
            note("m", m()? as f64) as usize,
            note("t", t()? as f64) as usize,
        )?,
        Lemma::GenStrongly => bounds::gen_bound_strongly(
            note("L", l()?),
            note("beta", need(c.beta, "--beta")?),
            note("gamma", need(c.gamma, "--gamma")?),
            note("n", n()? as f64) as usize,
            note("m", m()? as f64) as usize,
        )?,
        Lemma::GenNonsmooth => bounds::gen_bound_nonsmooth(
            note("eta", eta()?),
            note("L", l()?),
            note("B", need(c.b, "--B")?),
            note("C", need(c.c_lower, "--C")?),
            note("D", need(c.d, "--D")?),
            note("n", n()? as f64) as usize,
            note("m", m()? as f64) as usize,
            note("t", t()? as f64) as usize,
        )?,
        Lemma::IterateNorm => bounds::iterate_norm_bound(
            note("eta", eta()?),
            note("L", l()?),
            note("B", need(c.b, "--B")?),
            note("C", need(c.c_lower, "--C")?),
            note("t", t()? as f64) as usize,
        )?,
        Lemma::Stability => {
            let family = need(a.family, "--family")?;
            let p = mixing_matrix(&build_graph(family, n()?, None)?)?;
            let convexity = match c.gamma {
                Some(gamma) => Convexity::Strongly { beta: need(c.beta, "--beta")?, gamma },
                None => Convexity::Convex,
            };
            bounds::stability_bound(
                note("eta", eta()?),
                note("L", l()?),
                note("m", m()? as f64) as usize,
                &p,
                note("v", need(a.v, "--v")? as f64) as usize,
                note("w", need(a.w, "--w")? as f64) as usize,
                note("t", t()? as f64) as usize,
                convexity,
            )?
        }
        Lemma::NetworkTerm => bounds::network_term_bound(
            note("eta", eta()?),
            note("L", l()?),
            note("kappa", c.kappa.unwrap_or(l()?)),
            note("n", n()? as f64) as usize,
            note("sigma2", sigma2()?),
            note("s", t()? as f64) as usize,
        )?,
        Lemma::OptSmooth => {
            bounds::opt_bound_smooth(note("rho", rho()?), note("t", t()? as f64) as usize, n()?, note("sigma2", sigma2()?), &c.problem()?)?
        }
        Lemma::OptNonsmooth => {
            bounds::opt_bound_nonsmooth(note("eta", eta()?), note("t", t()? as f64) as usize, n()?, note("sigma2", sigma2()?), &c.problem()?)?
        }
        Lemma::TestSmooth => bounds::test_bound_smooth(
            note("rho", rho()?),
            note("t", t()? as f64) as usize,
            n()?,
            note("m", m()? as f64) as usize,
            note("sigma2", sigma2()?),
            &c.problem()?,
        )?,
        Lemma::TestNonsmooth => bounds::test_bound_nonsmooth(
            note("eta", eta()?),
            note("t", t()? as f64) as usize,
            n()?,
            note("m", m()? as f64) as usize,
            note("sigma2", sigma2()?),
            &c.problem()?,
        )?,
    };
    if a.json {
        writeln!(out, "{}", bounds::BoundReport::new(&name, inputs, value).to_json()?)?;
    } else {
        writeln!(out, "{value:.6}")?;
    }
    Ok(())
}

/// Everything a config-driven command needs, resolved once.
struct Context {
    config: Config,
    seed: u64,
    out_dir: PathBuf,
    check: bool,
    command: &'static str,
}

const TRUTH_DOMAIN: u64 = 0;
const INDEX_DOMAIN: u64 = 1;
const STABILITY_DOMAIN: u64 = 2;
const GENERALISATION_DOMAIN: u64 = 3;
const ORACLE_DOMAIN: u64 = 4;

impl Context {
    fn new(cli: &Cli, overrides: &ProblemArgs) -> Result<Context> {
        let mut config = match &cli.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        overrides.apply(&mut config);
        let seed = cli.seed.unwrap_or_else(|| config.seed());
        config.seed = Some(seed);
        let command = match cli.command {
            Command::Run(_) => "run",
            Command::Sweep => "sweep",
            Command::Stability(_) => "stability",
            Command::Oracle(_) => "oracle",
            _ => unreachable!("only config-driven commands carry a context"),
        };
        Ok(Context { config, seed, out_dir: cli.out_dir.clone(), check: cli.check, command })
    }

    fn graph(&self) -> Result<(Graph, MixingMatrix)> {
        let g = self.config.graph.build()?;
        let p = mixing_matrix(&g)?;
        Ok((g, p))
    }

    fn generator(&self) -> Result<DataGenerator> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[TRUTH_DOMAIN]));
        DataGenerator::gaussian_truth(&mut rng, self.config.data.d, self.config.data.sampling)
    }

    fn variant(&self) -> Result<Variant> {
        self.config.run.variant()
    }

    /// The configured step size, or the schedule's value at horizon `t` with
    /// `G` taken from the empirical risk minimiser of `data` unless given.
    fn eta(&self, loss: &Loss, data: &Dataset, gap: f64) -> Result<(f64, Option<ProblemConstants>)> {
        let run = &self.config.run;
        match (run.eta, run.schedule) {
            (Some(eta), None) => Ok((eta, None)),
            (None, Some(schedule)) => {
                let consts = self.config.constants.resolve(loss, || {
                    let erm = erm_reference(loss, data.all(), ERM_TOLERANCE, ERM_MAX_ITER)?;
                    info!("G = {:.6} from the empirical risk minimiser ({} iterations)", erm.g, erm.iterations);
                    Ok(erm.g)
                })?;
                let regime = run.regime.unwrap_or_else(|| self.config.loss.default_regime());
                let eta = schedules::step_size(regime, schedule, run.t, data.n(), data.m(), gap, &consts)?;
                Ok((eta, Some(consts)))
            }
            (None, None) => Err(Error::Config("set run.eta or run.schedule".into())),
            (Some(_), Some(_)) => Err(Error::Config("set only one of run.eta and run.schedule".into())),
        }
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        std::fs::create_dir_all(&self.out_dir)?;
        Ok(BufWriter::new(File::create(self.out_dir.join(name))?))
    }

    fn write_manifest(&self, constants: Option<ProblemConstants>, notes: Option<serde_json::Value>) -> Result<()> {
        self.write_manifest_with(None, constants, notes)
    }

    fn write_manifest_with(
        &self,
        sweep: Option<crate::experiments::SweepConfig>,
        constants: Option<ProblemConstants>,
        notes: Option<serde_json::Value>,
    ) -> Result<()> {
        let manifest = Manifest {
            command: self.command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.seed,
            config: self.config.clone(),
            sweep,
            constants,
            notes,
        };
        let mut f = self.create("manifest.json")?;
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        writeln!(f)?;
        f.flush()?;
        Ok(())
    }

    /// Under `--check` turns failures into an invariant violation; otherwise
    /// reports them as warnings.
    fn verdict(&self, failures: &[String]) -> Result<()> {
        for f in failures {
            warn!("check failed: {f}");
        }
        if self.check && !failures.is_empty() {
            return Err(Error::InvariantViolation(failures.join("; ")));
        }
        Ok(())
    }
}

fn cmd_run(ctx: &Context, out: &mut dyn Write) -> Result<()> {
    let cfg = &ctx.config;
    let (_, p) = ctx.graph()?;
    let loss = cfg.loss.build()?;
    let task = generate_task(
        cfg.data.d,
        p.n(),
        cfg.data.m,
        cfg.data.nhat,
        derive_seed(ctx.seed, &[TRUTH_DOMAIN]),
        cfg.data.sampling,
    )?;
    let (eta, constants) = ctx.eta(&loss, &task.train, p.gap())?;
    let variant = ctx.variant()?;
    let mut run = RunConfig::new(&p, &task.train, &loss, eta, cfg.run.t, derive_seed(ctx.seed, &[INDEX_DOMAIN]))
        .with_variant(variant)
        .with_recording(cfg.run.recording()?);
    run.parallel = cfg.run.parallel;
    let trace = dsgd_run(&run)?;
    trace.write_csv(ctx.create("trace.csv")?)?;

    let average = |xs: &[Vec<f64>]| -> Vec<f64> {
        let n = xs.len() as f64;
        (0..xs[0].len()).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect()
    };
    let summary = [
        ("eta", eta),
        ("t", cfg.run.t as f64),
        ("sigma2", p.sigma2()),
        ("risk_final", out_of_sample_risk(&loss, &task.pool, &trace.final_iterates)),
        ("risk_ergodic", out_of_sample_risk(&loss, &task.pool, &trace.ergodic)),
        ("train_risk_average", loss.risk(&average(&trace.final_iterates), task.train.all())),
        ("max_deviation", trace.records.last().map_or(0.0, |r| r.max_deviation())),
    ];
    let mut csv = ctx.create("summary.csv")?;
    writeln!(csv, "metric,value")?;
    writeln!(out, "metric,value")?;
    for (k, v) in summary {
        writeln!(csv, "{k},{v}")?;
        writeln!(out, "{k},{v:.6}")?;
    }
    csv.flush()?;

    let mut failures = Vec::new();
    if !matches!(variant, Variant::Projected { .. }) && trace.recording.stride() == Some(1) {
        let residual = trace.average_recursion_residual()?;
        if residual > RECURSION_TOLERANCE {
            failures.push(format!("network-average recursion residual {residual:e} > {RECURSION_TOLERANCE:e}"));
        }
    }
    if variant == Variant::Standard && matches!(loss, Loss::Hinge { .. }) {
        let lc = loss.constants();
        for (round, max_norm) in trace.max_norms() {
            let bound = bounds::iterate_norm_bound(eta, lc.lipschitz, lc.upper_at_zero, lc.lower_bound, round)?;
            if max_norm > bound * (1.0 + 1e-12) {
                failures.push(format!("iterate norm {max_norm} exceeds {bound} at round {round}"));
                break;
            }
        }
    }
    ctx.write_manifest(constants, None)?;
    ctx.verdict(&failures)
}

#[derive(Serialize)]
struct CurveRow<'a> {
    topology: &'a str,
    schedule: Schedule,
    t: usize,
    mean: f64,
    stderr: f64,
}

fn cmd_sweep(ctx: &Context, out: &mut dyn Write) -> Result<()> {
    let sweep = ctx.config.sweep.resolve(ctx.seed)?;
    let result = risk_sweep(&sweep)?;
    result.write_csv(ctx.create("sweep.csv")?)?;
    let mut curves = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(ctx.create("curves.csv")?);
    writeln!(out, "topology,schedule,t,mean,stderr")?;
    for &net in &sweep.networks {
        for &schedule in &sweep.schedules {
            for point in result.curve(net, schedule) {
                curves.serialize(CurveRow { topology: net.name(), schedule, t: point.t, mean: point.mean, stderr: point.stderr })?;
                writeln!(out, "{},{},{},{:.6},{:.6}", net.name(), schedule, point.t, point.mean, point.stderr)?;
            }
        }
    }
    curves.flush()?;
    for task in result.tasks.iter().filter(|t| !t.erm_converged) {
        info!("replication {}: reference solution stopped at gradient norm {:e}", task.rep, task.erm_grad_norm);
    }
    let failures: Vec<String> = result
        .failures
        .iter()
        .map(|f| format!("{} {} t={} rep={}: {}", f.topology.name(), f.schedule, f.t, f.rep, f.error))
        .collect();
    let notes = serde_json::json!({ "tasks": result.tasks, "failures": result.failures });
    ctx.write_manifest_with(Some(sweep), None, Some(notes))?;
    ctx.verdict(&failures)
}

#[derive(Serialize)]
struct GeneralisationRow {
    v: usize,
    stability_mean: f64,
    stability_stderr: f64,
    direct_mean: f64,
    direct_stderr: f64,
    z: f64,
}

fn cmd_stability(ctx: &Context, out: &mut dyn Write) -> Result<()> {
    let cfg = &ctx.config;
    let st = &cfg.stability;
    let (graph, p) = ctx.graph()?;
    let loss = cfg.loss.build()?;
    let generator = ctx.generator()?;
    let eta = match (cfg.run.eta, cfg.run.schedule) {
        (Some(eta), None) => eta,
        _ => return Err(Error::Config("stability needs a fixed run.eta".into())),
    };
    let convexity = if st.strongly_convex {
        let lc = loss.constants();
        match (lc.smoothness, lc.strong_convexity) {
            (Some(beta), Some(gamma)) => Convexity::Strongly { beta, gamma },
            _ => return Err(Error::Config("stability.strongly_convex needs a smooth loss with loss.gamma".into())),
        }
    } else {
        Convexity::Convex
    };
    let mut sc = StabilityConfig::new(&p, &loss, &generator, cfg.data.m, eta, cfg.run.t, derive_seed(ctx.seed, &[STABILITY_DOMAIN]));
    sc.variant = ctx.variant()?;
    sc.recording = cfg.run.recording()?;
    sc.data_mode = st.data_mode;
    sc.convexity = convexity;
    sc.population_samples = st.population_samples;

    let mut failures = Vec::new();
    let mut estimates = Vec::new();
    writeln!(out, "w,k,reps,worst_excess,support")?;
    for &(w, k) in &st.pairs {
        let e = stability_estimate(&sc, w, k, st.reps)?;
        let distances = graph.distances_from(w);
        let support_ok = e.rounds.iter().enumerate().all(|(c, &t)| {
            (0..p.n()).all(|v| distances[v].is_some_and(|d| d < t) || e.mean[c][v] == 0.0)
        });
        let excess = e.worst_excess(BOUND_Z);
        writeln!(out, "{w},{k},{},{excess:.6},{}", st.reps, if support_ok { "PASS" } else { "FAIL" })?;
        if excess > 0.0 {
            failures.push(format!("pair ({w},{k}) exceeds its stability bound by {excess:e}"));
        }
        if !support_ok {
            failures.push(format!("pair ({w},{k}) moves nodes outside the support of P^s"));
        }
        estimates.push(e);
    }
    write_stability_csv(&estimates, ctx.create("stability.csv")?)?;

    if st.gen_reps > 0 {
        let gc = StabilityConfig { seed: derive_seed(ctx.seed, &[GENERALISATION_DOMAIN]), ..sc.clone() };
        let pairs = if st.exhaustive { PairSelection::Exhaustive } else { PairSelection::Sample(st.gen_pairs) };
        let g = generalisation_estimate(&gc, pairs, st.gen_reps)?;
        let mut csv = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(ctx.create("generalisation.csv")?);
        writeln!(out, "v,stability_mean,direct_mean,z")?;
        for v in 0..p.n() {
            let se = g.stability_stderr[v].hypot(g.direct_stderr[v]);
            let z = if se > 0.0 { (g.stability_mean[v] - g.direct_mean[v]) / se } else { 0.0 };
            csv.serialize(GeneralisationRow {
                v,
                stability_mean: g.stability_mean[v],
                stability_stderr: g.stability_stderr[v],
                direct_mean: g.direct_mean[v],
                direct_stderr: g.direct_stderr[v],
                z,
            })?;
            writeln!(out, "{v},{:.6},{:.6},{z:.3}", g.stability_mean[v], g.direct_mean[v])?;
            if z.abs() > ORACLE_Z {
                failures.push(format!("node {v}: generalisation estimates differ by {z:.2} standard errors"));
            }
        }
        csv.flush()?;
    }
    ctx.write_manifest(None, None)?;
    ctx.verdict(&failures)
}

#[derive(Serialize)]
struct OracleRow {
    quantity: String,
    v: usize,
    exact: f64,
    mc_mean: f64,
    mc_stderr: f64,
    z: f64,
    pass: bool,
}

fn cmd_oracle(ctx: &Context, out: &mut dyn Write) -> Result<()> {
    let cfg = &ctx.config;
    let (_, p) = ctx.graph()?;
    let loss = cfg.loss.build()?;
    let generator = ctx.generator()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, &[ORACLE_DOMAIN]));
    let data = generator.dataset(&mut rng, p.n(), cfg.data.m)?;
    let replacements = generator.sample(&mut rng, p.n() * cfg.data.m);
    let (eta, constants) = ctx.eta(&loss, &data, p.gap())?;
    let oc = OracleConfig {
        mixing: &p,
        data: &data,
        loss: &loss,
        eta,
        horizon: cfg.run.t,
        variant: ctx.variant()?,
        replacements: &replacements,
    };
    let exact = brute_force_oracle(&oc)?;
    let mc = monte_carlo_oracle(&oc, cfg.oracle.mc_reps, derive_seed(ctx.seed, &[ORACLE_DOMAIN, 1]))?;

    let mut rows = Vec::new();
    let mut push = |quantity: String, v: usize, exact: f64, mean: f64, se: f64| {
        let z = if se > 0.0 { (mean - exact) / se } else if mean == exact { 0.0 } else { f64::INFINITY };
        rows.push(OracleRow { quantity, v, exact, mc_mean: mean, mc_stderr: se, z, pass: z.abs() <= ORACLE_Z });
    };
    let m = cfg.data.m;
    for (i, row) in exact.exact.delta.iter().enumerate() {
        for (v, &x) in row.iter().enumerate() {
            push(format!("delta_{}_{}", i / m, i % m), v, x, mc.mean.delta[i][v], mc.stderr.delta[i][v]);
        }
    }
    for (v, &x) in exact.exact.gen_gap.iter().enumerate() {
        push("gen_gap".into(), v, x, mc.mean.gen_gap[v], mc.stderr.gen_gap[v]);
    }
    push("average_risk".into(), 0, exact.exact.average_risk, mc.mean.average_risk, mc.stderr.average_risk);

    let mut failures: Vec<String> = Vec::new();
    let mut csv = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(ctx.create("oracle.csv")?);
    writeln!(out, "quantity,v,exact,mc_mean,mc_stderr,z,status")?;
    for r in &rows {
        csv.serialize(r)?;
        let status = if r.pass { "PASS" } else { "FAIL" };
        writeln!(out, "{},{},{:.6},{:.6},{:.6},{:.3},{status}", r.quantity, r.v, r.exact, r.mc_mean, r.mc_stderr, r.z)?;
        if !r.pass {
            failures.push(format!("{} at node {}: Monte Carlo off by {:.2} standard errors", r.quantity, r.v, r.z));
        }
    }
    csv.flush()?;

    if oc.variant == Variant::Standard {
        let lipschitz = loss.constants().lipschitz;
        for (i, row) in exact.exact.delta.iter().enumerate() {
            let w = i / m;
            let bound = bounds::stability_bound_row(eta, lipschitz, m, &p, w, cfg.run.t, Convexity::Convex)?;
            for (v, &x) in row.iter().enumerate() {
                let ok = x <= bound[v] * (1.0 + 1e-12);
                writeln!(out, "bound_delta_{}_{},{v},{x:.6},{:.6},,,{}", w, i % m, bound[v], if ok { "PASS" } else { "FAIL" })?;
                if !ok {
                    failures.push(format!("exact delta ({w},{}) at node {v} exceeds its bound", i % m));
                }
            }
        }
    }
    let notes = serde_json::json!({ "sequences": exact.sequences.to_string(), "eta": eta });
    ctx.write_manifest(constants, Some(notes))?;
    ctx.verdict(&failures)
}
