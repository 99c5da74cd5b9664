//! Social-graph emotion prediction.
//!
//! The crate turns phone interaction logs into weighted social graphs,
//! re-partitions those graphs into fixed-size model inputs (GEDD), trains a
//! graph-convolution + LSTM predictor against two non-graph baselines and
//! relates per-user prediction error to node centrality with GEE.
//!
//! Module map:
//!
//! * [`ingest`]: call/SMS log parsing and graph construction.
//! * [`graphcore`]: connected components, symmetric normalization, GEDD.
//! * [`centrality`]: degree, closeness, eigenvector and PageRank centrality.
//! * [`features`]: feature-panel preprocessing and sequence construction.
//! * [`autodiff`]: a small dense reverse-mode engine, layers and Adam.
//! * [`models`]: GCN-LSTM, CONV-LSTM and LSTM-only architectures.
//! * [`experiment`]: splits, training trials, metrics and sweeps.
//! * [`synth`]: synthetic emotion-contagion datasets.
//! * [`stats`]: GEE, Ward clustering, ANOVA and permutation tests.

pub mod autodiff;
pub mod centrality;
pub mod error;
pub mod experiment;
pub mod features;
pub mod graphcore;
pub mod ingest;
pub mod models;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use features::{FeaturePanel, LabelBin, SequenceSample, Target};
pub use graphcore::{ComponentSet, GeddOutput, NormalizedAdjacency, SubgraphBatch};
pub use ingest::SocialGraph;
pub use models::{ModelKind, ModelSpec};
