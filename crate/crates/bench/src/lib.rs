//! Fixtures shared by the benchmarks.

use nalgebra::DMatrix;
use socialgcn_core::autodiff::Tensor;
use socialgcn_core::graphcore::normalize_adjacency;
use socialgcn_core::models::{ModelInput, ModelSpec};
use socialgcn_core::synth::{generate, SynthConfig, SynthDataset};
use socialgcn_core::SocialGraph;

/// Synthetic cohort with default contagion settings.
pub fn cohort(n_users: usize, n_days: usize, seed: u64) -> SynthDataset {
    generate(&SynthConfig { n_users, n_days, seed, ..SynthConfig::default() }).expect("valid synthetic config")
}

/// `k` cliques of `size` nodes joined in a ring by single edges.
pub fn ring_of_cliques(k: usize, size: usize) -> SocialGraph {
    let n = k * size;
    let mut a = DMatrix::zeros(n, n);
    for c in 0..k {
        let base = c * size;
        for i in 0..size {
            for j in 0..size {
                if i != j {
                    a[(base + i, base + j)] = 1.0;
                }
            }
        }
        let next = ((c + 1) % k) * size;
        if k > 1 {
            a[(base, next)] = 1.0;
            a[(next, base)] = 1.0;
        }
    }
    SocialGraph::new((0..n).map(|i| format!("v{i}")).collect(), a, None).expect("square adjacency")
}

/// Deterministic dense input for `instances` copies of a `spec.w`-node
/// subgraph taken from the front of `graph`.
pub fn model_input(spec: &ModelSpec, graph: &SocialGraph, instances: usize) -> ModelInput {
    let w = spec.w;
    let sub = graph.adjacency.view((0, 0), (w, w)).into_owned();
    let norm = normalize_adjacency(&sub).expect("symmetric block").to_row_major();
    let n = w * instances;
    let mut adj = Tensor::zeros(n, n);
    for k in 0..instances {
        for r in 0..w {
            for c in 0..w {
                adj.set(k * w + r, k * w + c, norm[r * w + c]);
            }
        }
    }
    let steps = (0..spec.seq_len)
        .map(|t| {
            let data = (0..n * spec.feature_dim).map(|i| (((i * 31 + t * 17) % 97) as f64 / 48.5) - 1.0).collect();
            Tensor::new(n, spec.feature_dim, data).expect("consistent shape")
        })
        .collect();
    ModelInput { steps, adjacency: Some(adj) }
}
