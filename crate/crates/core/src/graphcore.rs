//! Connected components, symmetric normalization and GEDD (graph extraction
//! for dynamic distribution), which rewrites a graph of arbitrary size as a
//! list of subgraphs of exactly `w` nodes.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SocialGraph;

const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSet {
    /// Node indices per component, each sorted ascending; components are
    /// ordered by their smallest node index.
    pub components: Vec<Vec<usize>>,
    pub sizes: Vec<usize>,
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Component id of every node.
    pub fn membership(&self, n: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; n];
        for (c, nodes) in self.components.iter().enumerate() {
            for &v in nodes {
                out[v] = c;
            }
        }
        out
    }
}

fn is_symmetric(a: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    (0..n).all(|i| (i + 1..n).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= SYMMETRY_TOL * (1.0 + a[(i, j)].abs())))
}

fn neighbors(a: &DMatrix<f64>, v: usize) -> impl Iterator<Item = usize> + '_ {
    (0..a.ncols()).filter(move |&u| u != v && a[(v, u)] > 0.0)
}

/// Maximal sets of nodes joined by edges of positive weight.
pub fn connected_components(graph: &SocialGraph) -> Result<ComponentSet> {
    components_of(&graph.adjacency)
}

pub(crate) fn components_of(a: &DMatrix<f64>) -> Result<ComponentSet> {
    if a.nrows() != a.ncols() {
        return Err(Error::shape("connected_components", format!("{}x{} adjacency", a.nrows(), a.ncols())));
    }
    if !is_symmetric(a) {
        return Err(Error::pre("connected components need a symmetric adjacency"));
    }
    let n = a.nrows();
    let mut seen = vec![false; n];
    let mut components = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for u in neighbors(a, v) {
                if !seen[u] {
                    seen[u] = true;
                    comp.push(u);
                    queue.push_back(u);
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    let sizes = components.iter().map(Vec::len).collect();
    Ok(ComponentSet { components, sizes })
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    matrix: DMatrix<f64>,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn identity(n: usize) -> Self {
        Self { matrix: DMatrix::identity(n, n) }
    }

    /// Row-major copy of the entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.matrix.transpose().as_slice().to_vec()
    }

    /// Block-diagonal stacking. Normalizing a block-diagonal adjacency gives
    /// the block-diagonal of the normalized blocks, so this is exact.
    pub fn block_diag(blocks: &[&NormalizedAdjacency]) -> Self {
        let n: usize = blocks.iter().map(|b| b.size()).sum();
        let mut matrix = DMatrix::zeros(n, n);
        let mut off = 0;
        for b in blocks {
            let k = b.size();
            matrix.view_mut((off, off), (k, k)).copy_from(&b.matrix);
            off += k;
        }
        Self { matrix }
    }

    /// Reorders nodes: entry `(i, j)` of the result is `(perm[i], perm[j])`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = perm.len();
        Self { matrix: DMatrix::from_fn(n, n, |i, j| self.matrix[(perm[i], perm[j])]) }
    }
}

pub fn normalize_adjacency(adjacency: &DMatrix<f64>) -> Result<NormalizedAdjacency> {
    let n = adjacency.nrows();
    if n != adjacency.ncols() {
        return Err(Error::shape("normalize_adjacency", format!("{}x{} adjacency", n, adjacency.ncols())));
    }
    if adjacency.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::pre("adjacency entries must be finite and non-negative"));
    }
    if !is_symmetric(adjacency) {
        return Err(Error::pre("normalization needs a symmetric adjacency"));
    }
    let tilde = adjacency + DMatrix::<f64>::identity(n, n);
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / tilde.row(i).sum().sqrt()).collect();
    let matrix = DMatrix::from_fn(n, n, |i, j| inv_sqrt[i] * tilde[(i, j)] * inv_sqrt[j]);
    Ok(NormalizedAdjacency { matrix })
}

/// A fixed-size GEDD output.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphBatch {
    /// `w x w`, symmetric; rows and columns of duplicates are zero.
    pub adjacency: DMatrix<f64>,
    pub node_ids: Vec<String>,
    /// Index of each slot's node in the source graph.
    pub source_index: Vec<usize>,
    /// `true` for repetition padding.
    pub duplicate_mask: Vec<bool>,
    /// Source connected-component id of each slot.
    pub source_component: Vec<usize>,
}

impl SubgraphBatch {
    pub fn size(&self) -> usize {
        self.node_ids.len()
    }

    pub fn normalized(&self) -> NormalizedAdjacency {
        normalize_adjacency(&self.adjacency).expect("GEDD adjacency is symmetric and non-negative")
    }

    pub fn to_export(&self, cut_weight_total: f64) -> SubgraphExport {
        SubgraphExport {
            node_ids: self.node_ids.clone(),
            adjacency: (0..self.size()).map(|i| self.adjacency.row(i).iter().cloned().collect()).collect(),
            mask: self.duplicate_mask.clone(),
            provenance: Provenance {
                source_index: self.source_index.clone(),
                source_components: self.source_component.clone(),
                cut_weight_total,
            },
        }
    }
}

/// JSON form of a [`SubgraphBatch`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgraphExport {
    pub node_ids: Vec<String>,
    pub adjacency: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_index: Vec<usize>,
    pub source_components: Vec<usize>,
    pub cut_weight_total: f64,
}

#[derive(Debug, Clone)]
pub struct GeddOutput {
    pub batches: Vec<SubgraphBatch>,
    pub components: ComponentSet,
    /// Weight of input edges (each undirected edge once) whose endpoints
    /// ended up in different outputs.
    pub cut_weight: f64,
    /// Number of times a residue piece was split to fill a bin exactly.
    pub split_events: usize,
}

#[derive(Debug, Clone)]
struct Piece {
    nodes: Vec<usize>,
}

/// BFS order over the subgraph induced by `nodes`, starting from the node with
/// the most neighbours (ties: smallest index) and restarting the same way for
/// any nodes not reached.
fn bfs_order(a: &DMatrix<f64>, nodes: &[usize]) -> Vec<usize> {
    let mut inside = vec![false; a.nrows()];
    for &v in nodes {
        inside[v] = true;
    }
    let degree = |v: usize| neighbors(a, v).filter(|&u| inside[u]).count();
    let mut sorted = nodes.to_vec();
    sorted.sort_unstable();
    let mut seen = vec![false; a.nrows()];
    let mut order = Vec::with_capacity(nodes.len());
    while order.len() < nodes.len() {
        let seed = sorted
            .iter()
            .copied()
            .filter(|&v| !seen[v])
            .max_by(|&x, &y| degree(x).cmp(&degree(y)).then(y.cmp(&x)))
            .expect("unvisited node remains");
        seen[seed] = true;
        let mut queue = VecDeque::from([seed]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for u in neighbors(a, v) {
                if inside[u] && !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
    }
    order
}

/// Splits `graph` into subgraphs of exactly `w` nodes.
///
/// Components of size `w` pass through. Larger ones are cut into consecutive
/// BFS slices of `w` nodes, the remainder joining the residue. Residue pieces
/// are packed largest-first into bins of capacity `w`; when nothing fits the
/// remaining room, the largest piece is split along its BFS order. A final
/// underfull bin is padded by cycling through its own nodes; the copies are
/// isolated and masked.
pub fn gedd(graph: &SocialGraph, w: usize) -> Result<GeddOutput> {
    if w == 0 {
        return Err(Error::Config("GEDD size w must be at least 1".into()));
    }
    if graph.is_empty() {
        return Err(Error::pre("GEDD needs a non-empty graph"));
    }
    let a = &graph.adjacency;
    let components = components_of(a)?;
    let membership = components.membership(a.nrows());

    let mut main: Vec<Vec<usize>> = Vec::new();
    let mut residue: Vec<Piece> = Vec::new();
    for comp in &components.components {
        let q = comp.len();
        if q == w {
            main.push(comp.clone());
        } else if q < w {
            residue.push(Piece { nodes: comp.clone() });
        } else {
            let order = bfs_order(a, comp);
            let mut chunks = order.chunks(w);
            let full = q / w;
            for chunk in chunks.by_ref().take(full) {
                main.push(chunk.to_vec());
            }
            if let Some(rest) = chunks.next() {
                residue.push(Piece { nodes: rest.to_vec() });
            }
        }
    }

    // Stable sort keeps discovery order among equal sizes.
    residue.sort_by(|x, y| y.nodes.len().cmp(&x.nodes.len()));
    let mut split_events = 0;
    let mut bins: Vec<Vec<usize>> = Vec::new();
    while !residue.is_empty() {
        let mut bin = Vec::with_capacity(w);
        while bin.len() < w && !residue.is_empty() {
            let room = w - bin.len();
            if let Some(pos) = residue.iter().position(|p| p.nodes.len() <= room) {
                bin.extend(residue.remove(pos).nodes);
            } else {
                let largest = residue.remove(0);
                let order = bfs_order(a, &largest.nodes);
                bin.extend_from_slice(&order[..room]);
                let rest = Piece { nodes: order[room..].to_vec() };
                let at = residue.iter().position(|p| p.nodes.len() < rest.nodes.len()).unwrap_or(residue.len());
                residue.insert(at, rest);
                split_events += 1;
            }
        }
        bins.push(bin);
    }

    let mut placement = vec![usize::MAX; a.nrows()];
    let mut batches = Vec::with_capacity(main.len() + bins.len());
    for nodes in main.into_iter().chain(bins) {
        let b = batches.len();
        for &v in &nodes {
            placement[v] = b;
        }
        batches.push(assemble(graph, &nodes, w, &membership));
    }

    let n = a.nrows();
    let mut cut_weight = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            if placement[i] != placement[j] {
                cut_weight += a[(i, j)];
            }
        }
    }
    Ok(GeddOutput { batches, components, cut_weight, split_events })
}

fn assemble(graph: &SocialGraph, nodes: &[usize], w: usize, membership: &[usize]) -> SubgraphBatch {
    let real = nodes.len();
    debug_assert!(real >= 1 && real <= w);
    let source_index: Vec<usize> = (0..w).map(|k| nodes[k % real]).collect();
    let duplicate_mask: Vec<bool> = (0..w).map(|k| k >= real).collect();
    let adjacency = DMatrix::from_fn(w, w, |i, j| {
        if i >= real || j >= real || i == j {
            0.0
        } else {
            graph.adjacency[(source_index[i], source_index[j])]
        }
    });
    SubgraphBatch {
        adjacency,
        node_ids: source_index.iter().map(|&v| graph.node_ids[v].clone()).collect(),
        source_component: source_index.iter().map(|&v| membership[v]).collect(),
        source_index,
        duplicate_mask,
    }
}

/// Checks every structural GEDD guarantee and returns the list of violations.
pub fn check_gedd_invariants(graph: &SocialGraph, out: &GeddOutput, w: usize) -> std::result::Result<(), Vec<String>> {
    let mut problems = Vec::new();
    let a = &graph.adjacency;
    let n = graph.len();
    let membership = out.components.membership(n);
    let mut seen = vec![0usize; n];
    let mut retained = 0.0;
    for (b, batch) in out.batches.iter().enumerate() {
        if batch.size() != w
            || batch.adjacency.nrows() != w
            || batch.adjacency.ncols() != w
            || batch.duplicate_mask.len() != w
            || batch.source_index.len() != w
        {
            problems.push(format!("batch {b}: not of size {w}"));
            continue;
        }
        if !is_symmetric(&batch.adjacency) {
            problems.push(format!("batch {b}: adjacency not symmetric"));
        }
        for k in 0..w {
            let v = batch.source_index[k];
            if batch.node_ids[k] != graph.node_ids[v] {
                problems.push(format!("batch {b}: slot {k} id does not match source node"));
            }
            if batch.duplicate_mask[k] {
                let has_original = (0..w).any(|m| !batch.duplicate_mask[m] && batch.source_index[m] == v);
                if !has_original {
                    problems.push(format!("batch {b}: masked slot {k} repeats a node absent from the batch"));
                }
                if batch.adjacency.row(k).iter().any(|x| *x != 0.0) {
                    problems.push(format!("batch {b}: duplicate slot {k} has edges"));
                }
            } else {
                seen[v] += 1;
            }
        }
        for i in 0..w {
            for j in 0..w {
                if batch.duplicate_mask[i] || batch.duplicate_mask[j] || i == j {
                    continue;
                }
                let (u, v) = (batch.source_index[i], batch.source_index[j]);
                let x = batch.adjacency[(i, j)];
                if membership[u] != membership[v] && x != 0.0 {
                    problems.push(format!("batch {b}: edge between components at ({i},{j})"));
                }
                if x != a[(u, v)] {
                    problems.push(format!("batch {b}: weight ({i},{j}) differs from source"));
                }
                if i < j {
                    retained += x;
                }
            }
        }
    }
    for (v, count) in seen.iter().enumerate() {
        if *count != 1 {
            problems.push(format!("node {v} appears {count} times unmasked"));
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += a[(i, j)];
        }
    }
    if (retained + out.cut_weight - total).abs() > 1e-9 * (1.0 + total) {
        problems.push(format!("edge ledger off: retained {retained} + cut {} != total {total}", out.cut_weight));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems)
    }
}
