//! Node importance metrics: degree, closeness, eigenvector and PageRank.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SocialGraph;

pub const DEFAULT_DAMPING: f64 = 0.85;
pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 10_000;
/// Nodes with degree below this count as "small degree" in the outcome analysis.
pub const DEGREE_BUCKET: usize = 4;

/// Number of nodes `u` with `A[u][v] > 0` (an indicator count, weights ignored).
pub fn degree_centrality(graph: &SocialGraph) -> Vec<usize> {
    let a = &graph.adjacency;
    (0..a.ncols()).map(|v| (0..a.nrows()).filter(|&u| u != v && a[(u, v)] > 0.0).count()).collect()
}

/// Hop distances from `src` following edges `A[v][u] > 0`; `None` when
/// unreachable.
pub fn hop_distances(a: &DMatrix<f64>, src: usize) -> Vec<Option<usize>> {
    let n = a.nrows();
    let mut dist = vec![None; n];
    dist[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(v) = queue.pop_front() {
        let d = dist[v].expect("queued nodes have a distance");
        for u in 0..n {
            if u != v && a[(v, u)] > 0.0 && dist[u].is_none() {
                dist[u] = Some(d + 1);
                queue.push_back(u);
            }
        }
    }
    dist
}

/// `C_c(v) = Σ_{u ≠ v, reachable} N / d(v, u)` over hop distances.
pub fn closeness_centrality(graph: &SocialGraph) -> Vec<f64> {
    let n = graph.len();
    let nf = n as f64;
    (0..n)
        .map(|v| {
            hop_distances(&graph.adjacency, v)
                .iter()
                .enumerate()
                .filter_map(|(u, d)| match d {
                    Some(d) if u != v => Some(nf / *d as f64),
                    _ => None,
                })
                .sum()
        })
        .collect()
}

/// Unit-norm principal eigenvector by normalized power iteration.
///
/// The iteration runs on `A + I`, which has the same eigenvectors as `A` but
/// no longer oscillates on bipartite graphs.
pub fn eigenvector_centrality(graph: &SocialGraph, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = graph.len();
    if n == 0 {
        return Err(Error::pre("eigenvector centrality needs a non-empty graph"));
    }
    let a = &graph.adjacency;
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let mut next: Vec<f64> = (0..n).map(|i| x[i] + (0..n).map(|j| a[(i, j)] * x[j]).sum::<f64>()).collect();
        let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut next {
            *v /= norm;
        }
        residual = next.iter().zip(&x).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        x = next;
        if residual < tol {
            return Ok(x);
        }
    }
    Err(Error::NotConverged { iterations: max_iter, residual })
}

/// PageRank with uniform redistribution of sink mass. Sums to one.
pub fn pagerank_centrality(graph: &SocialGraph, gamma: f64, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!("damping must lie in (0, 1), got {gamma}")));
    }
    let n = graph.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let a = &graph.adjacency;
    let nf = n as f64;
    let out_degree: Vec<f64> = (0..n).map(|u| a.row(u).sum()).collect();
    let mut x = vec![1.0 / nf; n];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let sink_mass: f64 = (0..n).filter(|&u| out_degree[u] <= 0.0).map(|u| x[u]).sum();
        let base = (1.0 - gamma) / nf + gamma * sink_mass / nf;
        let mut next = vec![base; n];
        for u in 0..n {
            if out_degree[u] > 0.0 {
                let share = gamma * x[u] / out_degree[u];
                for v in 0..n {
                    let w = a[(u, v)];
                    if w > 0.0 {
                        next[v] += share * w;
                    }
                }
            }
        }
        residual = next.iter().zip(&x).map(|(p, q)| (p - q).abs()).sum();
        x = next;
        if residual < tol {
            let total: f64 = x.iter().sum();
            return Ok(x.into_iter().map(|v| v / total).collect());
        }
    }
    Err(Error::NotConverged { iterations: max_iter, residual })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralityRow {
    pub user_id: String,
    pub degree: usize,
    pub closeness: f64,
    pub eigenvector: f64,
    pub pagerank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralityTable {
    pub rows: Vec<CentralityRow>,
}

impl CentralityTable {
    pub fn compute(graph: &SocialGraph) -> Result<Self> {
        let degree = degree_centrality(graph);
        let closeness = closeness_centrality(graph);
        let eigenvector = eigenvector_centrality(graph, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        let pagerank = pagerank_centrality(graph, DEFAULT_DAMPING, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        let rows = (0..graph.len())
            .map(|i| CentralityRow {
                user_id: graph.node_ids[i].clone(),
                degree: degree[i],
                closeness: closeness[i],
                eigenvector: eigenvector[i],
                pagerank: pagerank[i],
            })
            .collect();
        Ok(Self { rows })
    }

    /// CSV with header `user_id,degree,closeness,eigenvector,pagerank`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        for row in &self.rows {
            wtr.serialize(row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}
