//! Communication graphs, the mixing matrix `P = I - (D - A)/(d_max + 1)` and its
//! spectral quantities.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Above this size the dense eigendecomposition is replaced by power iteration
/// on `P - 11ᵀ/n`.
pub const DENSE_EIGEN_LIMIT: usize = 2048;

const EIGEN_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Cycle,
    Grid,
    Complete,
    Custom,
}

impl Topology {
    pub const FAMILIES: [Topology; 3] = [Topology::Cycle, Topology::Grid, Topology::Complete];

    pub fn as_str(&self) -> &'static str {
        match self {
            Topology::Cycle => "cycle",
            Topology::Grid => "grid",
            Topology::Complete => "complete",
            Topology::Custom => "custom",
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cycle" => Ok(Topology::Cycle),
            "grid" => Ok(Topology::Grid),
            "complete" => Ok(Topology::Complete),
            "custom" => Ok(Topology::Custom),
            other => Err(Error::Config(format!(
                "unknown topology '{other}' (valid: cycle, grid, complete, custom)"
            ))),
        }
    }
}

/// Simple, undirected, connected graph on nodes `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    /// Normalised as `(v, w)` with `v < w`, sorted.
    edges: Vec<(usize, usize)>,
    kind: Topology,
    adjacency: Vec<Vec<usize>>,
}

/// Exact integer square root, if `n` is a perfect square.
fn perfect_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r.checked_mul(r) == Some(n)).then_some(r)
}

impl Graph {
    pub fn build(kind: Topology, n: usize, custom_edges: Option<&[(usize, usize)]>) -> Result<Graph> {
        if n == 0 {
            return Err(Error::EmptyGraph);
        }
        let edges: Vec<(usize, usize)> = match kind {
            Topology::Cycle => match n {
                1 => vec![],
                2 => vec![(0, 1)],
                _ => (0..n).map(|v| (v, (v + 1) % n)).collect(),
            },
            Topology::Complete => (0..n)
                .flat_map(|v| ((v + 1)..n).map(move |w| (v, w)))
                .collect(),
            Topology::Grid => {
                let side = perfect_sqrt(n).ok_or(Error::NonSquareGrid(n))?;
                let mut e = Vec::with_capacity(2 * side * side.saturating_sub(1));
                for r in 0..side {
                    for c in 0..side {
                        let v = r * side + c;
                        if c + 1 < side {
                            e.push((v, v + 1));
                        }
                        if r + 1 < side {
                            e.push((v, v + side));
                        }
                    }
                }
                e
            }
            Topology::Custom => custom_edges
                .ok_or_else(|| Error::InvalidGraph("custom topology needs an edge list".into()))?
                .to_vec(),
        };
        Graph::from_edges(kind, n, &edges)
    }

    fn from_edges(kind: Topology, n: usize, edges: &[(usize, usize)]) -> Result<Graph> {
        let mut set = BTreeSet::new();
        for &(v, w) in edges {
            if v >= n || w >= n {
                return Err(Error::InvalidGraph(format!("edge {v}-{w} references a node outside 0..{n}")));
            }
            if v == w {
                return Err(Error::InvalidGraph(format!("self-loop at node {v}")));
            }
            set.insert((v.min(w), v.max(w)));
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); n];
        for &(v, w) in &edges {
            adjacency[v].push(w);
            adjacency[w].push(v);
        }
        for nb in &mut adjacency {
            nb.sort_unstable();
        }
        let g = Graph { n, edges, kind, adjacency };
        let reached = g.distances_from(0).iter().filter(|d| d.is_some()).count();
        if reached != n {
            return Err(Error::Disconnected { n, reached });
        }
        Ok(g)
    }

    /// Reads `n` on the first line, then one `v w` pair per line (0-indexed).
    /// Blank lines and `#` comments are skipped.
    pub fn parse_edge_list(text: &str) -> Result<Graph> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let n: usize = lines
            .next()
            .ok_or_else(|| Error::InvalidGraph("empty edge-list file".into()))?
            .parse()
            .map_err(|e| Error::InvalidGraph(format!("bad node count: {e}")))?;
        let mut edges = Vec::new();
        for line in lines {
            let mut it = line.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(v)), Some(Ok(w)), None) => edges.push((v, w)),
                _ => return Err(Error::InvalidGraph(format!("bad edge line '{line}'"))),
            }
        }
        Graph::build(Topology::Custom, n, Some(&edges))
    }

    pub fn load_edge_list(path: impl AsRef<Path>) -> Result<Graph> {
        Graph::parse_edge_list(&std::fs::read_to_string(path)?)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> Topology {
        self.kind
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbours(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.n).map(|v| self.degree(v)).max().unwrap_or(0)
    }

    /// Hop distances from `source`; `None` for unreachable nodes.
    pub fn distances_from(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        let mut queue = VecDeque::from([source]);
        dist[source] = Some(0);
        while let Some(v) = queue.pop_front() {
            let dv = dist[v].unwrap_or(0);
            for &w in &self.adjacency[v] {
                if dist[w].is_none() {
                    dist[w] = Some(dv + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }
}

/// Convenience wrapper mirroring the topology constructors.
pub fn build_graph(kind: Topology, n: usize, custom_edges: Option<&[(usize, usize)]>) -> Result<Graph> {
    Graph::build(kind, n, custom_edges)
}

/// Symmetric doubly stochastic matrix supported on a graph.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    entries: DMatrix<f64>,
    /// Non-zero entries per row, `(column, value)`, diagonal included.
    rows: Vec<Vec<(usize, f64)>>,
    sigma2: f64,
}

impl MixingMatrix {
    /// `P = I - (D - A)/(d_max + 1)`.
    pub fn from_graph(g: &Graph) -> Result<MixingMatrix> {
        let n = g.n();
        let reached = g.distances_from(0).iter().filter(|d| d.is_some()).count();
        if reached != n {
            return Err(Error::Disconnected { n, reached });
        }
        let scale = 1.0 / (g.max_degree() as f64 + 1.0);
        let mut entries = DMatrix::zeros(n, n);
        let mut rows = Vec::with_capacity(n);
        for v in 0..n {
            let mut row = Vec::with_capacity(g.degree(v) + 1);
            let diag = 1.0 - g.degree(v) as f64 * scale;
            entries[(v, v)] = diag;
            row.push((v, diag));
            for &w in g.neighbours(v) {
                entries[(v, w)] = scale;
                row.push((w, scale));
            }
            row.sort_unstable_by_key(|&(w, _)| w);
            rows.push(row);
        }
        let mut p = MixingMatrix { entries, rows, sigma2: 0.0 };
        p.sigma2 = p.compute_sigma2()?;
        if n > 1 && p.sigma2 >= 1.0 - 1e-14 {
            return Err(Error::InvariantViolation(format!(
                "mixing matrix has sigma2 = {} (no spectral gap)",
                p.sigma2
            )));
        }
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, v: usize, w: usize) -> f64 {
        self.entries[(v, w)]
    }

    pub fn row(&self, v: usize) -> &[(usize, f64)] {
        &self.rows[v]
    }

    /// Second-largest eigenvalue in absolute value.
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn gap(&self) -> f64 {
        1.0 - self.sigma2
    }

    fn compute_sigma2(&self) -> Result<f64> {
        let n = self.n();
        if n == 1 {
            return Ok(0.0);
        }
        if n <= DENSE_EIGEN_LIMIT {
            let eig = self
                .entries
                .clone()
                .try_symmetric_eigen(f64::EPSILON, 200_000)
                .ok_or(Error::EigenNonConvergence { tolerance: EIGEN_TOLERANCE })?;
            let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            // Drop the Perron eigenvalue 1 once.
            let top = values
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - 1.0).abs().total_cmp(&(b.1 - 1.0).abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            values.swap_remove(top);
            let s = values.iter().fold(0.0f64, |acc, l| acc.max(l.abs()));
            Ok(s.clamp(0.0, 1.0))
        } else {
            self.sigma2_power_iteration(EIGEN_TOLERANCE, 1_000_000)
        }
    }

    /// Spectral radius of `P - 11ᵀ/n` by power iteration, which equals sigma2
    /// for symmetric doubly stochastic `P`. Used for large graphs.
    pub fn sigma2_power_iteration(&self, tolerance: f64, max_iter: usize) -> Result<f64> {
        let n = self.n();
        if n == 1 {
            return Ok(0.0);
        }
        let mut x: Vec<f64> = (0..n)
            .map(|i| (crate::rng::counter_u64(0x5eed, i, 0) >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
            .collect();
        let mut y = vec![0.0; n];
        let project = |x: &mut [f64]| {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            x.iter_mut().for_each(|xi| *xi -= mean);
        };
        let normalise = |x: &mut [f64]| {
            let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                x.iter_mut().for_each(|a| *a /= norm);
            }
            norm
        };
        project(&mut x);
        if normalise(&mut x) == 0.0 {
            return Ok(0.0);
        }
        let mut estimate = 0.0;
        for _ in 0..max_iter {
            // Two applications per iteration so +/- pairs of eigenvalues cannot
            // make the ratio oscillate.
            for _ in 0..2 {
                for (v, yv) in y.iter_mut().enumerate() {
                    *yv = self.rows[v].iter().map(|&(w, p)| p * x[w]).sum();
                }
                project(&mut y);
                std::mem::swap(&mut x, &mut y);
            }
            let growth = normalise(&mut x);
            let next = growth.sqrt();
            if (next - estimate).abs() <= tolerance * next.max(1.0) {
                return Ok(next.clamp(0.0, 1.0));
            }
            estimate = next;
        }
        Err(Error::EigenNonConvergence { tolerance })
    }

    /// Row `v` of `P^s`, by `s` repeated vector-matrix products.
    pub fn matrix_power_row(&self, s: usize, v: usize) -> Result<Vec<f64>> {
        if s == 0 {
            return Err(Error::param("matrix power exponent must be >= 1"));
        }
        Ok(self.power_rows(v, s).pop().unwrap_or_default())
    }

    /// Rows `v` of `P^1, ..., P^s_max`.
    pub fn power_rows(&self, v: usize, s_max: usize) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut current = vec![0.0; n];
        current[v] = 1.0;
        let mut out = Vec::with_capacity(s_max);
        for _ in 0..s_max {
            // (e_v P^s) P, using symmetry of P.
            let next: Vec<f64> = (0..n)
                .map(|w| self.rows[w].iter().map(|&(u, p)| p * current[u]).sum())
                .collect();
            out.push(next.clone());
            current = next;
        }
        out
    }
}

pub fn mixing_matrix(g: &Graph) -> Result<MixingMatrix> {
    MixingMatrix::from_graph(g)
}

/// `(sigma2, gap)` of a mixing matrix.
pub fn spectral_gap(p: &MixingMatrix) -> (f64, f64) {
    (p.sigma2(), p.gap())
}
