//! Synchronous Distributed SGD: a local stochastic subgradient step at every
//! node followed by averaging with the mixing matrix.
//!
//! Rounds are indexed as in the analysis: the iterates start at `X^1 = 0` and
//! the update from `X^s` to `X^{s+1}` samples `K^{s+1}_v` uniformly from the
//! node's local indices. A run with horizon `t` performs `t` updates so that both
//! ergodic conventions are available: the mean of `X^1..X^t` and the mean of
//! `X^2..X^{t+1}`. The reported final iterate is `X^t`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::MixingMatrix;
use crate::loss::Loss;
use crate::rng;
use crate::vecops::{dist, norm, project_ball};

/// Any coordinate beyond this magnitude aborts the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Variant {
    /// `X'_v = sum_w P_vw (X_w - eta g_w)`
    Standard,
    /// Standard step followed by projection onto the ball of `radius`.
    Projected { radius: f64 },
    /// `X'_v = sum_w P_vw X_w - eta g_v`
    Nedic,
}

/// Which rounds a trace keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Recording {
    /// Rounds `1, 1 + k, 1 + 2k, ...` and the horizon.
    Every(usize),
    /// About this many log-spaced rounds, plus the horizon.
    LogSpaced(usize),
}

impl Recording {
    /// Stride 1 up to `10^4` rounds, otherwise ~100 log-spaced checkpoints.
    pub fn auto(horizon: usize) -> Recording {
        if horizon <= 10_000 {
            Recording::Every(1)
        } else {
            Recording::LogSpaced(100)
        }
    }

    pub fn stride(&self) -> Option<usize> {
        match *self {
            Recording::Every(k) => Some(k),
            Recording::LogSpaced(_) => None,
        }
    }

    /// Sorted, de-duplicated rounds in `1..=horizon`.
    pub fn checkpoints(&self, horizon: usize) -> Vec<usize> {
        let mut out: Vec<usize> = match *self {
            Recording::Every(k) => (1..=horizon).step_by(k.max(1)).collect(),
            Recording::LogSpaced(count) => {
                let count = count.max(2);
                let top = (horizon as f64).log10();
                (0..count)
                    .map(|i| 10f64.powf(top * i as f64 / (count - 1) as f64).round() as usize)
                    .map(|s| s.clamp(1, horizon))
                    .collect()
            }
        };
        out.push(horizon);
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone)]
pub struct RunConfig<'a> {
    pub mixing: &'a MixingMatrix,
    pub data: &'a Dataset,
    pub loss: &'a Loss,
    pub eta: f64,
    pub horizon: usize,
    pub seed: u64,
    pub variant: Variant,
    pub recording: Recording,
    /// Keep every sampled index in the trace.
    pub record_indices: bool,
    /// Run the per-node phases on the rayon pool. Output is identical either way.
    pub parallel: bool,
}

impl<'a> RunConfig<'a> {
    pub fn new(mixing: &'a MixingMatrix, data: &'a Dataset, loss: &'a Loss, eta: f64, horizon: usize, seed: u64) -> Self {
        RunConfig {
            mixing,
            data,
            loss,
            eta,
            horizon,
            seed,
            variant: Variant::Standard,
            recording: Recording::auto(horizon),
            record_indices: false,
            parallel: false,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_recording(mut self, recording: Recording) -> Self {
        self.recording = recording;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::param(format!("step size must be finite and > 0, got {}", self.eta)));
        }
        if self.horizon == 0 {
            return Err(Error::param("horizon must be >= 1"));
        }
        if self.data.n() != self.mixing.n() {
            return Err(Error::param(format!(
                "dataset has {} nodes but the graph has {}",
                self.data.n(),
                self.mixing.n()
            )));
        }
        if let Variant::Projected { radius } = self.variant {
            if !(radius > 0.0) {
                return Err(Error::param(format!("projection radius must be > 0, got {radius}")));
            }
        }
        if let Recording::Every(0) | Recording::LogSpaced(0) = self.recording {
            return Err(Error::param("recording stride/count must be positive"));
        }
        Ok(())
    }
}

/// One node-parallel update from `x` into `out`. `grads` receives the sampled
/// subgradients and `y` is scratch of the same size.
#[allow(clippy::too_many_arguments)]
fn advance(
    variant: Variant,
    mixing: &MixingMatrix,
    data: &Dataset,
    loss: &Loss,
    eta: f64,
    indices: &[usize],
    x: &[f64],
    grads: &mut [f64],
    y: &mut [f64],
    out: &mut [f64],
    parallel: bool,
) {
    let d = data.dim();
    let gradient_phase = |w: usize, g: &mut [f64], yw: &mut [f64]| {
        let xw = &x[w * d..(w + 1) * d];
        loss.subgradient_into(xw, data.get(w, indices[w]), g);
        match variant {
            Variant::Nedic => yw.copy_from_slice(xw),
            _ => yw.iter_mut().zip(xw).zip(g.iter()).for_each(|((yi, xi), gi)| *yi = xi - eta * gi),
        }
    };
    if parallel {
        grads
            .par_chunks_mut(d)
            .zip(y.par_chunks_mut(d))
            .enumerate()
            .for_each(|(w, (g, yw))| gradient_phase(w, g, yw));
    } else {
        grads
            .chunks_mut(d)
            .zip(y.chunks_mut(d))
            .enumerate()
            .for_each(|(w, (g, yw))| gradient_phase(w, g, yw));
    }
    // Barrier: consensus only reads the completed y.
    let y: &[f64] = y;
    let grads: &[f64] = grads;
    let consensus_phase = |v: usize, ov: &mut [f64]| {
        ov.iter_mut().for_each(|o| *o = 0.0);
        for &(w, p) in mixing.row(v) {
            ov.iter_mut().zip(&y[w * d..(w + 1) * d]).for_each(|(o, yi)| *o += p * yi);
        }
        match variant {
            Variant::Standard => {}
            Variant::Projected { radius } => project_ball(ov, radius),
            Variant::Nedic => ov
                .iter_mut()
                .zip(&grads[v * d..(v + 1) * d])
                .for_each(|(o, g)| *o -= eta * g),
        }
    };
    if parallel {
        out.par_chunks_mut(d).enumerate().for_each(|(v, ov)| consensus_phase(v, ov));
    } else {
        out.chunks_mut(d).enumerate().for_each(|(v, ov)| consensus_phase(v, ov));
    }
}

fn check_state(state: &[Vec<f64>], data: &Dataset, mixing: &MixingMatrix, indices: &[usize]) -> Result<Vec<f64>> {
    let n = mixing.n();
    if state.len() != n || indices.len() != n || data.n() != n {
        return Err(Error::param("state, indices, dataset and mixing matrix disagree on node count"));
    }
    if let Some(&k) = indices.iter().find(|&&k| k >= data.m()) {
        return Err(Error::param(format!("sample index {k} outside 0..{}", data.m())));
    }
    let d = data.dim();
    if state.iter().any(|x| x.len() != d) {
        return Err(Error::param("iterate dimension does not match the data"));
    }
    if state.iter().flatten().any(|a| !a.is_finite()) {
        return Err(Error::Divergence { round: 0, node: 0 });
    }
    Ok(state.concat())
}

fn step_with(
    variant: Variant,
    mixing: &MixingMatrix,
    data: &Dataset,
    loss: &Loss,
    eta: f64,
    state: &[Vec<f64>],
    indices: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let x = check_state(state, data, mixing, indices)?;
    let mut grads = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    advance(variant, mixing, data, loss, eta, indices, &x, &mut grads, &mut y, &mut out, false);
    let d = data.dim();
    if let Some(node) = diverged_node(&out, d) {
        return Err(Error::Divergence { round: 0, node });
    }
    Ok(out.chunks(d).map(<[f64]>::to_vec).collect())
}

/// One Distributed SGD round with explicit sampled indices `K_v`.
pub fn dsgd_step(
    mixing: &MixingMatrix,
    data: &Dataset,
    loss: &Loss,
    eta: f64,
    state: &[Vec<f64>],
    indices: &[usize],
) -> Result<Vec<Vec<f64>>> {
    step_with(Variant::Standard, mixing, data, loss, eta, state, indices)
}

pub fn projected_dsgd_step(
    mixing: &MixingMatrix,
    data: &Dataset,
    loss: &Loss,
    eta: f64,
    state: &[Vec<f64>],
    indices: &[usize],
    radius: f64,
) -> Result<Vec<Vec<f64>>> {
    if !(radius > 0.0) {
        return Err(Error::param(format!("projection radius must be > 0, got {radius}")));
    }
    step_with(Variant::Projected { radius }, mixing, data, loss, eta, state, indices)
}

pub fn nedic_step(
    mixing: &MixingMatrix,
    data: &Dataset,
    loss: &Loss,
    eta: f64,
    state: &[Vec<f64>],
    indices: &[usize],
) -> Result<Vec<Vec<f64>>> {
    step_with(Variant::Nedic, mixing, data, loss, eta, state, indices)
}

fn diverged_node(x: &[f64], d: usize) -> Option<usize> {
    x.iter()
        .position(|a| !(a.abs() <= DIVERGENCE_THRESHOLD))
        .map(|i| i / d)
}

/// Stepwise runner. Holds `X^s` for the current round `s`.
#[derive(Debug, Clone)]
pub struct Dsgd<'a> {
    config: RunConfig<'a>,
    d: usize,
    round: usize,
    x: Vec<f64>,
    next: Vec<f64>,
    y: Vec<f64>,
    grads: Vec<f64>,
    indices: Vec<usize>,
}

impl<'a> Dsgd<'a> {
    pub fn new(config: RunConfig<'a>) -> Result<Self> {
        config.validate()?;
        let d = config.data.dim();
        let len = config.mixing.n() * d;
        Ok(Dsgd {
            d,
            round: 1,
            x: vec![0.0; len],
            next: vec![0.0; len],
            y: vec![0.0; len],
            grads: vec![0.0; len],
            indices: vec![0; config.mixing.n()],
            config,
        })
    }

    pub fn config(&self) -> &RunConfig<'a> {
        &self.config
    }

    /// Current round `s`; the iterates are `X^s`.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn n(&self) -> usize {
        self.config.mixing.n()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn iterate(&self, v: usize) -> &[f64] {
        &self.x[v * self.d..(v + 1) * self.d]
    }

    pub fn iterates(&self) -> Vec<Vec<f64>> {
        self.x.chunks(self.d).map(<[f64]>::to_vec).collect()
    }

    /// Indices sampled by the most recent step.
    pub fn last_indices(&self) -> &[usize] {
        &self.indices
    }

    /// Subgradient sampled at node `v` by the most recent step.
    pub fn last_gradient(&self, v: usize) -> &[f64] {
        &self.grads[v * self.d..(v + 1) * self.d]
    }

    pub fn network_average(&self) -> Vec<f64> {
        node_mean(&self.x, self.n(), self.d)
    }

    /// `X^s -> X^{s+1}`.
    pub fn step(&mut self) -> Result<()> {
        let next_round = self.round + 1;
        let m = self.config.data.m();
        let seed = self.config.seed;
        self.indices
            .iter_mut()
            .enumerate()
            .for_each(|(v, k)| *k = rng::sample_index(seed, v, next_round, m));
        let c = &self.config;
        advance(
            c.variant,
            c.mixing,
            c.data,
            c.loss,
            c.eta,
            &self.indices,
            &self.x,
            &mut self.grads,
            &mut self.y,
            &mut self.next,
            c.parallel,
        );
        if let Some(node) = diverged_node(&self.next, self.d) {
            return Err(Error::Divergence { round: next_round, node });
        }
        std::mem::swap(&mut self.x, &mut self.next);
        self.round = next_round;
        Ok(())
    }
}

fn node_mean(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for chunk in x.chunks(d) {
        mean.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= n as f64);
    mean
}

/// Network-level snapshot at a recorded round `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub round: usize,
    /// `X̄^s`
    pub network_average: Vec<f64>,
    /// `(1/n) sum_v g_v^{s+1}`, the subgradients of the update leaving round `s`.
    pub gradient_mean: Vec<f64>,
    /// `‖X_v^s - X̄^s‖` per node.
    pub deviations: Vec<f64>,
    /// `‖X_v^s‖` per node.
    pub norms: Vec<f64>,
}

impl Record {
    pub fn max_deviation(&self) -> f64 {
        self.deviations.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_norm(&self) -> f64 {
        self.norms.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub n: usize,
    pub dim: usize,
    pub horizon: usize,
    pub eta: f64,
    pub seed: u64,
    pub variant: Variant,
    pub recording: Recording,
    /// `X_v^t`
    pub final_iterates: Vec<Vec<f64>>,
    /// `X_v^{t+1}`
    pub next_iterates: Vec<Vec<f64>>,
    /// `(1/t) sum_{s=1}^t X_v^s`
    pub ergodic: Vec<Vec<f64>>,
    /// `(1/t) sum_{s=1}^t X_v^{s+1}`
    pub ergodic_next: Vec<Vec<f64>>,
    pub records: Vec<Record>,
    /// `K_v^{s}` for `s = 2..=t+1`, when requested.
    pub sampled_indices: Option<Vec<Vec<usize>>>,
}

/// Deviation of the nodes from the network average at one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationPoint {
    pub round: usize,
    pub max: f64,
    pub max_squared: f64,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    round: usize,
    node: Option<usize>,
    metric: &'a str,
    value: f64,
}

impl Trace {
    fn require_unit_stride(&self) -> Result<()> {
        match self.recording {
            Recording::Every(1) => Ok(()),
            Recording::Every(stride) => Err(Error::StrideMismatch { stride }),
            Recording::LogSpaced(_) => Err(Error::StrideMismatch { stride: 0 }),
        }
    }

    /// Largest violation of `X̄^{s+1} = X̄^s - eta (1/n) sum_v g_v^{s+1}` over
    /// consecutive recorded rounds. Needs stride-1 recording.
    pub fn average_recursion_residual(&self) -> Result<f64> {
        self.require_unit_stride()?;
        Ok(self
            .records
            .windows(2)
            .map(|w| {
                let predicted: Vec<f64> = w[0]
                    .network_average
                    .iter()
                    .zip(&w[0].gradient_mean)
                    .map(|(a, g)| a - self.eta * g)
                    .collect();
                dist(&predicted, &w[1].network_average)
            })
            .fold(0.0, f64::max))
    }

    pub fn max_norms(&self) -> Vec<(usize, f64)> {
        self.records.iter().map(|r| (r.round, r.max_norm())).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Trace> {
        Ok(serde_json::from_str(text)?)
    }

    /// Flat CSV with columns `round,node,metric,value`; network-level metrics
    /// leave `node` empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        for r in &self.records {
            for (v, (dev, nrm)) in r.deviations.iter().zip(&r.norms).enumerate() {
                w.serialize(CsvRow { round: r.round, node: Some(v), metric: "deviation", value: *dev })?;
                w.serialize(CsvRow { round: r.round, node: Some(v), metric: "norm", value: *nrm })?;
            }
            w.serialize(CsvRow { round: r.round, node: None, metric: "max_deviation", value: r.max_deviation() })?;
            w.serialize(CsvRow { round: r.round, node: None, metric: "max_norm", value: r.max_norm() })?;
            w.serialize(CsvRow {
                round: r.round,
                node: None,
                metric: "average_norm",
                value: norm(&r.network_average),
            })?;
        }
        let t = self.horizon;
        for (v, (fin, erg)) in self.final_iterates.iter().zip(&self.ergodic).enumerate() {
            w.serialize(CsvRow { round: t, node: Some(v), metric: "final_norm", value: norm(fin) })?;
            w.serialize(CsvRow { round: t, node: Some(v), metric: "ergodic_norm", value: norm(erg) })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `t` rounds from `X^1 = 0`.
pub fn dsgd_run(config: &RunConfig<'_>) -> Result<Trace> {
    let mut sim = Dsgd::new(config.clone())?;
    let (n, d, t) = (sim.n(), sim.dim(), config.horizon);
    let checkpoints = config.recording.checkpoints(t);
    let mut next_checkpoint = checkpoints.iter().peekable();
    let mut records = Vec::with_capacity(checkpoints.len());
    let mut sum_current = vec![0.0; n * d];
    let mut sum_next = vec![0.0; n * d];
    let mut indices = config.record_indices.then(|| Vec::with_capacity(t));
    let mut final_iterates = Vec::new();

    for s in 1..=t {
        // sim holds X^s.
        sum_current.iter_mut().zip(&sim.x).for_each(|(a, b)| *a += b);
        let snapshot = if next_checkpoint.peek() == Some(&&s) {
            next_checkpoint.next();
            let avg = sim.network_average();
            let deviations = (0..n).map(|v| dist(sim.iterate(v), &avg)).collect();
            let norms = (0..n).map(|v| norm(sim.iterate(v))).collect();
            Some((avg, deviations, norms))
        } else {
            None
        };
        if s == t {
            final_iterates = sim.iterates();
        }
        sim.step()?;
        sum_next.iter_mut().zip(&sim.x).for_each(|(a, b)| *a += b);
        if let Some(idx) = indices.as_mut() {
            idx.push(sim.last_indices().to_vec());
        }
        if let Some((network_average, deviations, norms)) = snapshot {
            records.push(Record {
                round: s,
                network_average,
                gradient_mean: node_mean(&sim.grads, n, d),
                deviations,
                norms,
            });
        }
    }
    let scale = 1.0 / t as f64;
    let to_nodes = |flat: Vec<f64>| -> Vec<Vec<f64>> {
        flat.chunks(d).map(|c| c.iter().map(|a| a * scale).collect()).collect()
    };
    Ok(Trace {
        n,
        dim: d,
        horizon: t,
        eta: config.eta,
        seed: config.seed,
        variant: config.variant,
        recording: config.recording,
        final_iterates,
        next_iterates: sim.iterates(),
        ergodic: to_nodes(sum_current),
        ergodic_next: to_nodes(sum_next),
        records,
        sampled_indices: indices,
    })
}

/// `max_v ‖X_v^s - X̄^s‖` and its square at every recorded round.
pub fn network_deviation(trace: &Trace) -> Result<Vec<DeviationPoint>> {
    trace.require_unit_stride()?;
    Ok(trace
        .records
        .iter()
        .map(|r| {
            let max = r.max_deviation();
            DeviationPoint { round: r.round, max, max_squared: max * max }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, mixing_matrix, Topology};
    use crate::loss::Observation;
    use approx::assert_abs_diff_eq;

    fn toy_data(n: usize, m: usize) -> Dataset {
        let obs = (0..n * m)
            .map(|i| {
                let a = i as f64 * 0.7;
                Observation::new(vec![0.5 * a.cos(), 0.5 * a.sin(), 0.1], if i % 3 == 0 { -1.0 } else { 1.0 })
            })
            .collect();
        Dataset::new(n, m, obs).unwrap()
    }

    fn p(kind: Topology, n: usize) -> MixingMatrix {
        mixing_matrix(&build_graph(kind, n, None).unwrap()).unwrap()
    }

    #[test]
    fn zero_gradients_give_pure_consensus() {
        let mix = p(Topology::Cycle, 4);
        // Every margin is far above 1, so the hinge is inactive.
        let obs = (0..4).map(|_| Observation::new(vec![1.0, 0.0], 1.0)).collect();
        let data = Dataset::new(4, 1, obs).unwrap();
        let state: Vec<Vec<f64>> = (0..4).map(|v| vec![10.0 + v as f64, v as f64]).collect();
        let out = dsgd_step(&mix, &data, &Loss::hinge(), 0.3, &state, &[0; 4]).unwrap();
        let nedic = nedic_step(&mix, &data, &Loss::hinge(), 0.3, &state, &[0; 4]).unwrap();
        for v in 0..4 {
            for j in 0..2 {
                let expected: f64 = (0..4).map(|w| mix.get(v, w) * state[w][j]).sum();
                assert_abs_diff_eq!(out[v][j], expected, epsilon = 1e-14);
                assert_eq!(out[v][j], nedic[v][j]);
            }
        }
    }

    #[test]
    fn single_node_is_centralised_sgd() {
        let mix = p(Topology::Complete, 1);
        let data = toy_data(1, 3);
        let loss = Loss::logistic();
        let x = vec![0.2, -0.1, 0.4];
        let out = dsgd_step(&mix, &data, &loss, 0.5, std::slice::from_ref(&x), &[2]).unwrap();
        let g = loss.subgradient(&x, data.get(0, 2));
        for j in 0..3 {
            assert_abs_diff_eq!(out[0][j], x[j] - 0.5 * g[j], epsilon = 1e-15);
        }
        let nedic = nedic_step(&mix, &data, &loss, 0.5, std::slice::from_ref(&x), &[2]).unwrap();
        assert_eq!(out, nedic);
    }

    #[test]
    fn mean_follows_average_gradient() {
        let mix = p(Topology::Grid, 9);
        let data = toy_data(9, 2);
        let loss = Loss::logistic();
        let state: Vec<Vec<f64>> = (0..9).map(|v| vec![0.1 * v as f64, -0.2, 0.05 * v as f64]).collect();
        let idx: Vec<usize> = (0..9).map(|v| v % 2).collect();
        let out = dsgd_step(&mix, &data, &loss, 0.7, &state, &idx).unwrap();
        for j in 0..3 {
            let mean_in: f64 = state.iter().map(|x| x[j]).sum::<f64>() / 9.0;
            let gsum: f64 = (0..9).map(|w| loss.subgradient(&state[w], data.get(w, idx[w]))[j]).sum();
            let mean_out: f64 = out.iter().map(|x| x[j]).sum::<f64>() / 9.0;
            assert_abs_diff_eq!(mean_out, mean_in - 0.7 / 9.0 * gsum, epsilon = 1e-12);
        }
    }

    #[test]
    fn nedic_differs_by_half_gradient_gap() {
        let mix = p(Topology::Complete, 2);
        let data = toy_data(2, 1);
        let loss = Loss::logistic();
        let state = vec![vec![0.3, 0.1, -0.2], vec![-0.5, 0.4, 0.0]];
        let eta = 0.9;
        let a = dsgd_step(&mix, &data, &loss, eta, &state, &[0, 0]).unwrap();
        let b = nedic_step(&mix, &data, &loss, eta, &state, &[0, 0]).unwrap();
        let g1 = loss.subgradient(&state[0], data.get(0, 0));
        let g2 = loss.subgradient(&state[1], data.get(1, 0));
        for j in 0..3 {
            assert_abs_diff_eq!(a[0][j] - b[0][j], 0.5 * eta * (g1[j] - g2[j]), epsilon = 1e-14);
        }
    }

    #[test]
    fn projection_step() {
        let mix = p(Topology::Complete, 1);
        let obs = vec![Observation::new(vec![1.0, 0.0], 1.0)];
        let data = Dataset::new(1, 1, obs).unwrap();
        // Inactive hinge: output equals input; inside the ball it is unchanged.
        let inside = projected_dsgd_step(&mix, &data, &Loss::hinge(), 0.1, &[vec![1.5, 0.0]], &[0], 2.0).unwrap();
        assert_eq!(inside[0], vec![1.5, 0.0]);
        let outside = projected_dsgd_step(&mix, &data, &Loss::hinge(), 0.1, &[vec![4.0, 0.0]], &[0], 2.0).unwrap();
        assert_abs_diff_eq!(norm(&outside[0]), 2.0, epsilon = 1e-15);
        assert!(projected_dsgd_step(&mix, &data, &Loss::hinge(), 0.1, &[vec![4.0, 0.0]], &[0], 0.0).is_err());
    }

    #[test]
    fn horizon_one_is_all_zero() {
        let mix = p(Topology::Cycle, 5);
        let data = toy_data(5, 2);
        let loss = Loss::logistic();
        let trace = dsgd_run(&RunConfig::new(&mix, &data, &loss, 0.5, 1, 3)).unwrap();
        assert!(trace.final_iterates.iter().flatten().all(|&a| a == 0.0));
        assert!(trace.ergodic.iter().flatten().all(|&a| a == 0.0));
        assert_eq!(trace.ergodic_next, trace.next_iterates);
        assert!(trace.next_iterates.iter().flatten().any(|&a| a != 0.0));
        assert_eq!(network_deviation(&trace).unwrap()[0].max, 0.0);
    }

    #[test]
    fn two_node_closed_form() {
        // n = 2 complete, m = 1: both nodes coincide after every round, so
        // X^{s+1} = X^s - (eta/2) (g1(X^s) + g2(X^s)).
        let mix = p(Topology::Complete, 2);
        let data = Dataset::new(
            2,
            1,
            vec![Observation::new(vec![0.6, 0.0], 1.0), Observation::new(vec![0.0, 0.8], -1.0)],
        )
        .unwrap();
        let loss = Loss::logistic();
        let eta = 0.5;
        let trace = dsgd_run(&RunConfig::new(&mix, &data, &loss, eta, 2, 0)).unwrap();
        let sig = |a: f64| 1.0 / (1.0 + (-a).exp());
        // X^2 = -(eta/2)(-0.6/2 e1 + 0.8/2 e2)
        let x2 = [eta / 2.0 * 0.3, -eta / 2.0 * 0.4];
        // X^3 = X^2 - (eta/2)(-0.6 sig(-0.6 x2_0) e1 + 0.8 sig(0.8 x2_1) e2)
        let x3 = [
            x2[0] + eta / 2.0 * 0.6 * sig(-0.6 * x2[0]),
            x2[1] - eta / 2.0 * 0.8 * sig(0.8 * x2[1]),
        ];
        for v in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(trace.final_iterates[v][j], x2[j], epsilon = 1e-15);
                assert_abs_diff_eq!(trace.next_iterates[v][j], x3[j], epsilon = 1e-15);
                assert_abs_diff_eq!(trace.ergodic[v][j], x2[j] / 2.0, epsilon = 1e-15);
                assert_abs_diff_eq!(trace.ergodic_next[v][j], (x2[j] + x3[j]) / 2.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn divergence_is_reported_with_round() {
        let mix = p(Topology::Complete, 1);
        let obs = vec![Observation::new(vec![1.0], 1.0)];
        let data = Dataset::new(1, 1, obs).unwrap();
        // Tikhonov with a negative effective step would be needed to blow up;
        // a huge step on the penalised loss overshoots geometrically instead.
        let loss = Loss::tikhonov(Loss::logistic(), 1.0, 1.0).unwrap();
        let err = dsgd_run(&RunConfig::new(&mix, &data, &loss, 1e6, 100, 0)).unwrap_err();
        match err {
            Error::Divergence { round, node } => {
                assert!(round > 2 && round <= 101);
                assert_eq!(node, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let mix = p(Topology::Cycle, 3);
        let data = toy_data(4, 1);
        let loss = Loss::logistic();
        assert!(dsgd_run(&RunConfig::new(&mix, &data, &loss, 0.1, 5, 0)).is_err());
        let data = toy_data(3, 1);
        assert!(dsgd_run(&RunConfig::new(&mix, &data, &loss, 0.0, 5, 0)).is_err());
        assert!(dsgd_run(&RunConfig::new(&mix, &data, &loss, 0.1, 0, 0)).is_err());
    }

    #[test]
    fn strided_trace_rejects_deviation_queries() {
        let mix = p(Topology::Cycle, 3);
        let data = toy_data(3, 2);
        let loss = Loss::logistic();
        let cfg = RunConfig::new(&mix, &data, &loss, 0.1, 20, 0).with_recording(Recording::Every(5));
        let trace = dsgd_run(&cfg).unwrap();
        assert_eq!(trace.records.iter().map(|r| r.round).collect::<Vec<_>>(), vec![1, 6, 11, 16, 20]);
        assert!(matches!(network_deviation(&trace), Err(Error::StrideMismatch { stride: 5 })));
    }

    #[test]
    fn checkpoint_schedules() {
        assert_eq!(Recording::Every(1).checkpoints(3), vec![1, 2, 3]);
        let log = Recording::LogSpaced(100).checkpoints(1_000_000);
        assert_eq!(log.first(), Some(&1));
        assert_eq!(log.last(), Some(&1_000_000));
        assert!(log.len() <= 101 && log.len() > 50);
        assert_eq!(Recording::auto(10_000), Recording::Every(1));
        assert_eq!(Recording::auto(10_001), Recording::LogSpaced(100));
    }

    #[test]
    fn csv_and_json_roundtrip() {
        let mix = p(Topology::Cycle, 3);
        let data = toy_data(3, 2);
        let loss = Loss::hinge();
        let trace = dsgd_run(&RunConfig::new(&mix, &data, &loss, 0.1, 4, 9)).unwrap();
        let back = Trace::from_json(&trace.to_json().unwrap()).unwrap();
        assert_eq!(back, trace);
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("round,node,metric,value\n1,0,deviation,"));
        assert!(text.contains("\n4,,max_norm,"));
        assert!(!text.contains('\r'));
    }
}
