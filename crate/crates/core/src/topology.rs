//! Communication graphs, the gossip pair law they induce, and the spectral
//! constants used by the consensus analysis.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphKind {
    Ring,
    Complete,
    /// Row-major `n x n` adjacency.
    Custom(Vec<Vec<bool>>),
}

/// Connected undirected graph without self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    adjacency: Vec<bool>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    pub fn ring(n: usize) -> Result<Self> {
        build_graph(GraphKind::Ring, n)
    }

    pub fn complete(n: usize) -> Result<Self> {
        build_graph(GraphKind::Complete, n)
    }

    pub fn from_adjacency(adjacency: Vec<Vec<bool>>) -> Result<Self> {
        let n = adjacency.len();
        build_graph(GraphKind::Custom(adjacency), n)
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![vec![false; n]; n];
        for &(i, j) in edges {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            if j >= n {
                return Err(Error::IndexOutOfRange { index: j, len: n });
            }
            adj[i][j] = true;
            adj[j][i] = true;
        }
        Self::from_adjacency(adj)
    }

    /// Reads an edge list: first line `n`, then one whitespace-separated
    /// `i j` pair per line, 0-indexed. Blank lines and `#` comments are skipped.
    pub fn from_edge_list_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_edge_list(&text, &path.display().to_string())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && self.adjacency[i * self.n + j]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Edges as `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| {
                self.neighbors[i]
                    .iter()
                    .filter(move |&&j| j > i)
                    .map(move |&j| (i, j))
            })
            .collect()
    }

    pub fn laplacian(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| {
            if i == j {
                self.degree(i) as f64
            } else if self.is_edge(i, j) {
                -1.0
            } else {
                0.0
            }
        })
    }
}

pub fn parse_edge_list(text: &str, origin: &str) -> Result<Graph> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(idx, l)| (idx + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let malformed = |line: usize, message: String| Error::MalformedRow {
        path: origin.to_string(),
        line,
        message,
    };
    let (first_line, header) = lines
        .next()
        .ok_or_else(|| malformed(1, "empty edge list".into()))?;
    let n: usize = header
        .parse()
        .map_err(|_| malformed(first_line, format!("expected agent count, got `{header}`")))?;
    let mut edges = Vec::new();
    for (line, content) in lines {
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(malformed(line, format!("expected `i j`, got `{content}`")));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| malformed(line, format!("bad agent index `{s}`")))
        };
        let (i, j) = (parse(fields[0])?, parse(fields[1])?);
        if i == j {
            return Err(Error::InvalidAdjacency(format!(
                "self-loop on agent {i} at line {line}"
            )));
        }
        edges.push((i, j));
    }
    Graph::from_edges(n, &edges)
}

pub fn build_graph(kind: GraphKind, n: usize) -> Result<Graph> {
    if n < 2 {
        return Err(Error::InvalidAdjacency(format!(
            "need at least 2 agents, got {n}"
        )));
    }
    let mut adjacency = vec![false; n * n];
    match kind {
        GraphKind::Ring => {
            for i in 0..n {
                let j = (i + 1) % n;
                adjacency[i * n + j] = true;
                adjacency[j * n + i] = true;
            }
        }
        GraphKind::Complete => {
            for i in 0..n {
                for j in 0..n {
                    adjacency[i * n + j] = i != j;
                }
            }
        }
        GraphKind::Custom(rows) => {
            if rows.len() != n {
                return Err(Error::InvalidAdjacency(format!(
                    "expected {n} rows, got {}",
                    rows.len()
                )));
            }
            for (i, row) in rows.iter().enumerate() {
                if row.len() != n {
                    return Err(Error::InvalidAdjacency(format!(
                        "row {i} has {} entries, expected {n}",
                        row.len()
                    )));
                }
                if row[i] {
                    return Err(Error::InvalidAdjacency(format!("self-loop on agent {i}")));
                }
                for (j, &linked) in row.iter().enumerate() {
                    if linked != rows[j][i] {
                        return Err(Error::InvalidAdjacency(format!(
                            "asymmetric entry ({i}, {j})"
                        )));
                    }
                    adjacency[i * n + j] = linked;
                }
            }
        }
    }
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| adjacency[i * n + j]).collect())
        .collect();

    // Breadth-first reachability from agent 0.
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &neighbors[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    if let Some(unreachable) = seen.iter().position(|s| !s) {
        return Err(Error::DisconnectedGraph { unreachable });
    }

    Ok(Graph {
        n,
        adjacency,
        neighbors,
    })
}

/// Law of the active pair in one gossip cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct GossipPairDistribution {
    /// Keyed by `(i, j)` with `i < j`; only graph edges are stored.
    pub pair_probs: BTreeMap<(usize, usize), f64>,
    /// Probability that agent `i` is one of the two active agents.
    pub activation_probs: Vec<f64>,
}

impl GossipPairDistribution {
    pub fn pair_prob(&self, i: usize, j: usize) -> f64 {
        let key = if i < j { (i, j) } else { (j, i) };
        self.pair_probs.get(&key).copied().unwrap_or(0.0)
    }

    pub fn min_activation(&self) -> f64 {
        self.activation_probs
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Pair and activation probabilities for the two-stage draw: a uniformly
/// chosen agent wakes, then picks a uniformly chosen neighbor.
pub fn activation_probabilities(g: &Graph) -> GossipPairDistribution {
    let n = g.n() as f64;
    let activation_probs = (0..g.n())
        .map(|i| {
            let s: f64 = g
                .neighbors(i)
                .iter()
                .map(|&j| 1.0 / g.degree(j) as f64)
                .sum();
            (1.0 + s) / n
        })
        .collect();
    let pair_probs = g
        .edges()
        .into_iter()
        .map(|(i, j)| {
            let p = (1.0 / g.degree(i) as f64 + 1.0 / g.degree(j) as f64) / n;
            ((i, j), p)
        })
        .collect();
    GossipPairDistribution {
        pair_probs,
        activation_probs,
    }
}

/// `(e_i - e_j)(e_i - e_j)^T` as an `n x n` matrix.
pub fn gossip_laplacian(i: usize, j: usize, n: usize) -> Result<DMatrix<f64>> {
    for idx in [i, j] {
        if idx >= n {
            return Err(Error::IndexOutOfRange { index: idx, len: n });
        }
    }
    if i == j {
        return Err(Error::InvalidAdjacency(format!(
            "gossip pair needs two distinct agents, got ({i}, {j})"
        )));
    }
    let mut l = DMatrix::zeros(n, n);
    l[(i, i)] = 1.0;
    l[(j, j)] = 1.0;
    l[(i, j)] = -1.0;
    l[(j, i)] = -1.0;
    Ok(l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralConstants {
    /// Second-largest eigenvalue of the expected gossip Laplacian.
    pub lambda_bar_l: f64,
    /// Largest eigenvalue of `E[W_k^T W_k]` on the subspace orthogonal to
    /// the consensus direction, with `W_k = I - beta L_k`.
    pub lambda_contraction: f64,
    /// Minimum activation probability.
    pub p_m: f64,
}

pub fn expected_laplacian(g: &Graph, dist: &GossipPairDistribution) -> DMatrix<f64> {
    let n = g.n();
    let mut m = DMatrix::zeros(n, n);
    for (&(i, j), &p) in &dist.pair_probs {
        m[(i, i)] += p;
        m[(j, j)] += p;
        m[(i, j)] -= p;
        m[(j, i)] -= p;
    }
    m
}

/// `E[W_k^T W_k]` on the `n x n` block; the `I_{d_w}` Kronecker factor only
/// replicates the spectrum.
pub fn expected_mixing_gram(g: &Graph, dist: &GossipPairDistribution, beta: f64) -> DMatrix<f64> {
    let n = g.n();
    let mut m = DMatrix::zeros(n, n);
    for (&(i, j), &p) in &dist.pair_probs {
        let w = DMatrix::identity(n, n) - gossip_laplacian(i, j, n).expect("edge indices") * beta;
        m += (w.transpose() * &w) * p;
    }
    m
}

fn sorted_eigenvalues_desc(m: DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Projects out the consensus direction `1/sqrt(n)`.
pub fn deflate_consensus(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let p = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    &p * m * &p
}

pub fn spectral_constants(g: &Graph, beta: f64) -> SpectralConstants {
    let dist = activation_probabilities(g);
    let lbar = sorted_eigenvalues_desc(expected_laplacian(g, &dist));
    let gram = expected_mixing_gram(g, &dist, beta);
    // Largest eigenvalue of the deflated Gram matrix is the worst-case
    // contraction on the disagreement subspace (the deflated direction maps to 0).
    let contraction = sorted_eigenvalues_desc(deflate_consensus(&gram))[0];
    SpectralConstants {
        lambda_bar_l: lbar.get(1).copied().unwrap_or(0.0),
        lambda_contraction: contraction.clamp(0.0, 1.0),
        p_m: dist.min_activation(),
    }
}
