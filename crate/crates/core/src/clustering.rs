//! Spectral clustering over a cosine kNN affinity graph.
//!
//! Pipeline: pairwise cosine → each node keeps its K most similar neighbours
//! → union symmetrization with affinity `(1 + cos) / 2` → symmetric normalized
//! Laplacian → eigenvectors of the M smallest eigenvalues, rows unit-normalized
//! → seeded k-means++.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureVector;
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::numerics::{dot, jacobi_eigh, kmeans_pp, norm, DenseMatrix};
use crate::rng::{stream, Stream};

const KMEANS_MAX_ITERS: usize = 300;

/// Symmetric sparse affinity graph.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    n: usize,
    /// Per node, `(neighbour, weight)` sorted by neighbour index.
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl KnnGraph {
    /// Builds a graph from an explicit undirected edge list.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut adj: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for &(i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::InconsistentBatch(format!(
                    "edge ({i}, {j}) outside {n} nodes"
                )));
            }
            if i == j {
                return Err(Error::InconsistentBatch(format!("self-loop on node {i}")));
            }
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::InconsistentBatch(format!("edge weight {w} outside [0, 1]")));
            }
            adj[i].insert(j, w);
            adj[j].insert(i, w);
        }
        Ok(KnnGraph {
            n,
            neighbors: adj.into_iter().map(|m| m.into_iter().collect()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.neighbors[i]
            .binary_search_by_key(&j, |&(k, _)| k)
            .map_or(0.0, |pos| self.neighbors[i][pos].1)
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.neighbors[i].iter().map(|&(_, w)| w).sum()
    }
}

/// Links each node to its `k` highest-cosine neighbours (ties to the lower
/// index) and symmetrizes by union.
pub fn build_knn_graph(features: &[FeatureVector], k: usize) -> Result<KnnGraph> {
    let n = features.len();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidK { k, n });
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    let sq_norms: Vec<f64> = features.iter().map(|f| dot(f.values(), f.values())).collect();

    let picked: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut sims: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    // a zero vector has no direction: treat it as maximally dissimilar
                    let cos = if sq_norms[i] == 0.0 || sq_norms[j] == 0.0 {
                        -1.0
                    } else {
                        (dot(features[i].values(), features[j].values())
                            / (sq_norms[i] * sq_norms[j]).sqrt())
                        .clamp(-1.0, 1.0)
                    };
                    (j, cos)
                })
                .collect();
            let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
            if k < sims.len() {
                sims.select_nth_unstable_by(k - 1, order);
                sims.truncate(k);
            }
            sims.sort_by(order);
            sims
        })
        .collect();

    let mut edges = Vec::with_capacity(n * k);
    for (i, row) in picked.iter().enumerate() {
        for &(j, cos) in row {
            edges.push((i, j, ((1.0 + cos) / 2.0).clamp(0.0, 1.0)));
        }
    }
    KnnGraph::from_edges(n, &edges)
}

/// `L = I − D^{-1/2} W D^{-1/2}`; an isolated node gets an identity row.
pub fn normalized_laplacian(graph: &KnnGraph) -> DenseMatrix {
    let n = graph.len();
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let d = graph.degree(i);
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut l = DenseMatrix::identity(n);
    for i in 0..n {
        for &(j, w) in graph.neighbors(i) {
            l[(i, j)] = -w * inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    l
}

/// Cluster id per sample plus per-cluster sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub assignment: Vec<usize>,
    pub m: usize,
    pub counts: Vec<usize>,
}

impl ClusterAssignment {
    pub fn new(assignment: Vec<usize>, m: usize) -> Result<Self> {
        let mut counts = vec![0; m];
        for &c in &assignment {
            if c >= m {
                return Err(Error::InvalidM { m, n: assignment.len() });
            }
            counts[c] += 1;
        }
        Ok(ClusterAssignment { assignment, m, counts })
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

/// Renumbers labels in order of first appearance.
fn canonical_labels(raw: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    raw.iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect()
}

/// Spectral embedding of the training features (rows of the M bottom
/// eigenvectors, unit-normalized). Exposed for diagnostics.
pub fn spectral_embedding(features: &[FeatureVector], m: usize, k: usize) -> Result<Vec<Vec<f64>>> {
    let graph = build_knn_graph(features, k)?;
    let lap = normalized_laplacian(&graph);
    let eig = jacobi_eigh(&lap).map_err(|e| Error::EigenFailure(e.to_string()))?;
    let n = features.len();
    let rows = (0..n)
        .map(|r| {
            let mut row: Vec<f64> = (0..m).map(|c| eig.vectors[(r, c)]).collect();
            let len = norm(&row);
            if len > 0.0 {
                row.iter_mut().for_each(|v| *v /= len);
            }
            row
        })
        .collect();
    Ok(rows)
}

pub fn spectral_cluster(
    features: &[FeatureVector],
    m: usize,
    k: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    let n = features.len();
    if m == 0 || m > n {
        return Err(Error::InvalidM { m, n });
    }
    if m == n {
        return ClusterAssignment::new((0..n).collect(), m);
    }
    if m == 1 {
        return ClusterAssignment::new(vec![0; n], 1);
    }
    let rows = spectral_embedding(features, m, k)?;
    let mut rng = stream(seed, Stream::Clustering);
    let km = kmeans_pp(&rows, m, &mut rng, KMEANS_MAX_ITERS)?;
    ClusterAssignment::new(canonical_labels(&km.assignment), m)
}

/// Adjusted Rand Index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len();
    let choose2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_insert(0) += 1;
        *rows.entry(x).or_insert(0) += 1;
        *cols.entry(y).or_insert(0) += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if max_index == expected {
        // both partitions trivial in the same way
        return Ok(if index == expected { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max_index - expected))
}

/// Writes `id<TAB>cluster` lines.
pub fn write_cluster_dump<'a>(
    ids: impl IntoIterator<Item = &'a str>,
    clusters: &ClusterAssignment,
    path: &Path,
) -> Result<()> {
    let mut out = String::new();
    for (id, c) in ids.into_iter().zip(&clusters.assignment) {
        out.push_str(&format!("{id}\t{c}\n"));
    }
    write_atomic(path, out.as_bytes())
}
