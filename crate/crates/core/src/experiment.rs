//! Splits, training trials, evaluation metrics, repeated experiments and
//! graph-size / sequence-length sweeps.
//!
//! A training instance is one GEDD subgraph on one target day: every node of
//! the subgraph contributes its `L`-day window, and nodes whose (user, day)
//! sample belongs to the train, validation or test split carry that role in
//! the loss masks. Padding copies and nodes without a sample are masked out.
//! All model kinds see the same instances, so the baselines differ only in
//! how (and whether) they use the adjacency.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Mode, Tape, Tensor};
use crate::error::{Error, Result};
use crate::features::{bin_label_with, make_sequences, FeaturePanel, Standardizer, Target, DEFAULT_K, DEFAULT_THRESHOLDS, DEFAULT_Z};
use crate::graphcore::{gedd, GeddOutput};
use crate::ingest::{SocialGraph, DEFAULT_W1, DEFAULT_W2};
use crate::models::{GcnInput, Head, Model, ModelInput, ModelKind, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub target: Target,
    /// Call-graph share when mixing call and SMS graphs.
    pub mix: f64,
    pub w1: f64,
    pub w2: f64,
    pub k: usize,
    pub z: f64,
    /// Class boundaries for binning scores.
    pub thresholds: [f64; 2],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            target: Target::Stress,
            mix: 0.5,
            w1: DEFAULT_W1,
            w2: DEFAULT_W2,
            k: DEFAULT_K,
            z: DEFAULT_Z,
            thresholds: [DEFAULT_THRESHOLDS.0, DEFAULT_THRESHOLDS.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kinds: Vec<ModelKind>,
    pub w: usize,
    pub seq_len: usize,
    pub gcn_layers: Vec<usize>,
    pub lstm_hidden: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub dense_widths: Vec<usize>,
    pub dropout: f64,
    pub head: Head,
    pub gcn_input: GcnInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let s = ModelSpec::new(ModelKind::GcnLstm, 10, 5, 1);
        ModelConfig {
            kinds: ModelKind::ALL.to_vec(),
            w: s.w,
            seq_len: s.seq_len,
            gcn_layers: s.gcn_layers,
            lstm_hidden: s.lstm_hidden,
            conv_channels: s.conv_channels,
            conv_kernel: s.conv_kernel,
            dense_widths: s.dense_widths,
            dropout: s.dropout_rate,
            head: s.head,
            gcn_input: s.gcn_input,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, kind: ModelKind, feature_dim: usize) -> ModelSpec {
        ModelSpec {
            kind,
            w: self.w,
            seq_len: self.seq_len,
            feature_dim,
            gcn_layers: self.gcn_layers.clone(),
            lstm_hidden: self.lstm_hidden,
            conv_channels: self.conv_channels,
            conv_kernel: self.conv_kernel,
            dense_widths: self.dense_widths.clone(),
            dropout_rate: self.dropout,
            head: self.head,
            gcn_input: self.gcn_input,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub trials: usize,
    pub seed: u64,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub delta: f64,
    /// Approximate node count per minibatch; subgraphs are never split.
    pub batch_nodes: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            trials: 10,
            seed: 0,
            lr: AdamConfig::default().lr,
            max_epochs: 500,
            patience: 50,
            delta: 1e-5,
            batch_nodes: 128,
            split: [0.5, 0.1, 0.4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    GraphSize,
    SeqLen,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graph-size" => Ok(SweepAxis::GraphSize),
            "seq-len" => Ok(SweepAxis::SeqLen),
            other => Err(Error::Config(format!("unknown sweep axis `{other}` (expected graph-size|seq-len)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub vary: SweepAxis,
    pub values: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { vary: SweepAxis::GraphSize, values: vec![1, 5, 10, 15, 20] }
    }
}

/// Full run configuration, read from TOML with `[data]`, `[model]`,
/// `[train]` and `[sweep]` sections. Missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        check_fractions(&self.train.split)?;
        if self.train.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.model.kinds.is_empty() {
            return bad("at least one model kind is required".into());
        }
        if !(self.train.lr > 0.0) || !self.train.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.train.lr));
        }
        if self.train.max_epochs == 0 || self.train.patience == 0 || self.train.batch_nodes == 0 {
            return bad("max_epochs, patience and batch_nodes must be positive".into());
        }
        if !(self.train.delta >= 0.0) {
            return bad(format!("delta must be non-negative, got {}", self.train.delta));
        }
        if !(0.0..=1.0).contains(&self.data.mix) {
            return bad(format!("mix must be in [0, 1], got {}", self.data.mix));
        }
        let [lo, hi] = self.data.thresholds;
        if !(0.0 <= lo && lo <= hi && hi <= 100.0) {
            return bad(format!("thresholds must satisfy 0 <= lo <= hi <= 100, got {lo}, {hi}"));
        }
        if self.sweep.values.contains(&0) {
            return bad("sweep values must be positive".into());
        }
        self.model.spec(ModelKind::GcnLstm, self.model.conv_kernel.max(1)).validate()
    }
}

fn check_fractions(f: &[f64; 3]) -> Result<()> {
    if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must lie in [0, 1] and sum to 1, got {f:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Random partition of `0..n` into train/validation/test index lists (each
/// sorted). Sizes are `round(n·f_train)`, `round(n·f_val)` and the rest.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    check_fractions(&fractions)?;
    let n_train = (n as f64 * fractions[0]).round() as usize;
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train.min(n));
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::pre(format!("split of {n} samples by {fractions:?} leaves an empty part")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok((train, val, test))
}

/// [`split_indices`] applied to a sample list.
pub fn split_samples<T: Clone>(samples: &[T], fractions: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (a, b, c) = split_indices(samples.len(), fractions, seed)?;
    let pick = |ix: Vec<usize>| ix.into_iter().map(|i| samples[i].clone()).collect();
    Ok((pick(a), pick(b), pick(c)))
}

/// Micro-averaged F1 over classes `{0, 1, 2}` from pooled TP/FP/FN counts.
pub fn micro_f1(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::pre(format!("micro_f1 needs equal non-empty inputs, got {} and {}", pred.len(), truth.len())));
    }
    if let Some(c) = pred.iter().chain(truth).find(|c| **c > 2) {
        return Err(Error::pre(format!("class {c} outside {{0, 1, 2}}")));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for class in 0..3u8 {
        for (p, t) in pred.iter().zip(truth) {
            match (*p == class, *t == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    // Harmonic mean of pooled precision and recall, in count form so that a
    // single-label run reduces exactly to accuracy.
    if tp == 0 {
        return Ok(0.0);
    }
    Ok((2 * tp) as f64 / (2 * tp + fp + fn_) as f64)
}

/// Test predictions of one user within one topology.
#[derive(Debug, Clone, PartialEq)]
pub struct UserGroup {
    pub user: String,
    pub topology: String,
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRmse {
    pub user: String,
    pub topology: String,
    pub rmse: f64,
    pub n: usize,
    pub mean_true: f64,
    pub sd_true: f64,
}

/// Per-(user, topology) root mean squared error. Empty groups are skipped
/// and counted.
pub fn rmse_per_user(groups: &[UserGroup]) -> Result<(Vec<UserRmse>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for g in groups {
        if g.pred.len() != g.truth.len() {
            return Err(Error::pre(format!("user {}: {} predictions for {} targets", g.user, g.pred.len(), g.truth.len())));
        }
        if g.pred.is_empty() {
            skipped += 1;
            continue;
        }
        let n = g.pred.len() as f64;
        let mse = g.pred.iter().zip(&g.truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
        let mean_true = g.truth.iter().sum::<f64>() / n;
        let sd_true = (g.truth.iter().map(|t| (t - mean_true).powi(2)).sum::<f64>() / n).sqrt();
        out.push(UserRmse { user: g.user.clone(), topology: g.topology.clone(), rmse: mse.sqrt(), n: g.pred.len(), mean_true, sd_true });
    }
    Ok((out, skipped))
}

/// Stops once the monitored loss fails to improve by at least `delta` for
/// `patience` consecutive updates.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub best: f64,
    pub best_epoch: usize,
    patience: usize,
    delta: f64,
    wait: usize,
    epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, delta: f64) -> EarlyStopper {
        EarlyStopper { best: f64::INFINITY, best_epoch: 0, patience, delta, wait: 0, epoch: 0 }
    }

    /// Returns `(improved, stop)`.
    pub fn update(&mut self, loss: f64) -> (bool, bool) {
        self.epoch += 1;
        if loss < self.best - self.delta || (self.best.is_infinite() && loss.is_finite()) {
            self.best = loss;
            self.best_epoch = self.epoch;
            self.wait = 0;
            (true, false)
        } else {
            self.wait += 1;
            (false, self.wait >= self.patience)
        }
    }
}

/// Symmetric graph whose node order matches the panel's users. Panel users
/// missing from the graph become isolated nodes; graph nodes without panel
/// rows are dropped.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub graph: SocialGraph,
    pub panel: FeaturePanel,
    pub dropped_graph_nodes: usize,
}

impl ExperimentData {
    pub fn new(graph: &SocialGraph, panel: FeaturePanel) -> Result<ExperimentData> {
        let sym = if graph.is_symmetric(1e-12) { graph.clone() } else { graph.symmetrized() };
        let gidx = sym.index_of();
        let map: Vec<Option<usize>> = panel.users.iter().map(|u| gidx.get(u.as_str()).copied()).collect();
        let n = panel.n_users();
        let mut a = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if let (Some(gi), Some(gj)) = (map[i], map[j]) {
                    a[(i, j)] = sym.adjacency[(gi, gj)];
                }
            }
        }
        let kept: HashSet<usize> = map.iter().flatten().copied().collect();
        let graph = SocialGraph::new(panel.users.clone(), a, sym.interval)?;
        Ok(ExperimentData { graph, panel, dropped_graph_nodes: sym.len() - kept.len() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Masked,
    In(Split),
}

#[derive(Debug, Clone)]
struct Instance {
    batch: usize,
    steps: Vec<Tensor>,
    target: Vec<f64>,
    role: Vec<Role>,
    user: Vec<usize>,
}

impl Instance {
    fn has(&self, split: Split) -> bool {
        self.role.contains(&Role::In(split))
    }
}

/// Identifier of GEDD subgraph `batch` at graph size `w`, as used in
/// [`UserRmse::topology`].
pub fn topology_id(w: usize, batch: usize) -> String {
    format!("w{w}/b{batch}")
}

/// GEDD partition plus per-subgraph normalized adjacency.
struct Layout {
    w: usize,
    gedd: GeddOutput,
    norm: Vec<Tensor>,
}

impl Layout {
    fn new(graph: &SocialGraph, w: usize) -> Result<Layout> {
        let gedd = gedd(graph, w)?;
        let norm = gedd
            .batches
            .iter()
            .map(|b| Tensor::new(w, w, b.normalized().to_row_major()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Layout { w, gedd, norm })
    }

    fn topology(&self, batch: usize) -> String {
        topology_id(self.w, batch)
    }
}

/// Everything a trial shares across model kinds.
struct TrialData {
    instances: Vec<Instance>,
    target_mean: f64,
    target_sd: f64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
}

fn build_trial(data: &ExperimentData, layout: &Layout, seq_len: usize, target: Target, split: [f64; 3], seed: u64) -> Result<TrialData> {
    let panel = &data.panel;
    let (samples, _) = make_sequences(panel, seq_len, target)?;
    let (train, val, test) = split_indices(samples.len(), split, seed)?;
    let mut role_of: HashMap<(usize, usize), Split> = HashMap::new();
    for (ix, s) in [(&train, Split::Train), (&val, Split::Val), (&test, Split::Test)] {
        for &i in ix {
            role_of.insert((samples[i].user_index, samples[i].day_index), s);
        }
    }
    let mut fit_rows: Vec<(usize, usize)> = train
        .iter()
        .flat_map(|&i| {
            let (u, n) = (samples[i].user_index, samples[i].day_index);
            (n - seq_len..n).map(move |d| (u, d))
        })
        .collect();
    fit_rows.sort_unstable();
    fit_rows.dedup();
    let z = Standardizer::fit(panel, Some(&fit_rows)).apply(panel);
    let train_targets: Vec<f64> = train.iter().map(|&i| samples[i].target).collect();
    let target_mean = train_targets.iter().sum::<f64>() / train_targets.len() as f64;
    let var = train_targets.iter().map(|t| (t - target_mean).powi(2)).sum::<f64>() / train_targets.len() as f64;
    let target_sd = if var > 0.0 { var.sqrt() } else { 1.0 };

    let nf = panel.n_features();
    let w = layout.w;
    let mut instances = Vec::new();
    for (b, batch) in layout.gedd.batches.iter().enumerate() {
        for n in seq_len..panel.n_days() {
            let mut role = Vec::with_capacity(w);
            let mut tgt = Vec::with_capacity(w);
            for slot in 0..w {
                let u = batch.source_index[slot];
                let r = if batch.duplicate_mask[slot] { None } else { role_of.get(&(u, n)).copied() };
                role.push(r.map_or(Role::Masked, Role::In));
                tgt.push(if r.is_some() { panel.label(target, u, n).unwrap_or(f64::NAN) } else { f64::NAN });
            }
            if role.iter().all(|r| *r == Role::Masked) {
                continue;
            }
            let mut steps = Vec::with_capacity(seq_len);
            for d in n - seq_len..n {
                let mut m = Vec::with_capacity(w * nf);
                for slot in 0..w {
                    let u = batch.source_index[slot];
                    // absent rows enter at the standardized mean
                    if z.is_present(u, d) {
                        m.extend_from_slice(z.row(u, d));
                    } else {
                        m.extend(std::iter::repeat_n(0.0, nf));
                    }
                }
                steps.push(Tensor::new(w, nf, m)?);
            }
            instances.push(Instance { batch: b, steps, target: tgt, role, user: batch.source_index.clone() });
        }
    }
    Ok(TrialData { instances, target_mean, target_sd, n_train: train.len(), n_val: val.len(), n_test: test.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub micro_f1: f64,
    pub rmse: f64,
    pub train_micro_f1: f64,
    pub per_user: Vec<UserRmse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub epoch: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub model: ModelKind,
    pub epochs: usize,
    pub best_epoch: usize,
    pub early_stopped: bool,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub metrics: Option<TestMetrics>,
    pub failure: Option<TrialFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub instances: usize,
    pub results: Vec<ModelResult>,
}

#[derive(Debug, Clone, Copy)]
struct TrainOptions {
    adam: AdamConfig,
    max_epochs: usize,
    patience: usize,
    delta: f64,
    batch_nodes: usize,
    thresholds: (f64, f64),
}

impl TrainOptions {
    fn from_config(cfg: &RunConfig) -> TrainOptions {
        TrainOptions {
            adam: AdamConfig { lr: cfg.train.lr, ..AdamConfig::default() },
            max_epochs: cfg.train.max_epochs,
            patience: cfg.train.patience,
            delta: cfg.train.delta,
            batch_nodes: cfg.train.batch_nodes,
            thresholds: (cfg.data.thresholds[0], cfg.data.thresholds[1]),
        }
    }
}

fn assemble(instances: &[&Instance], layout: &Layout, with_adjacency: bool) -> Result<ModelInput> {
    let seq_len = instances[0].steps.len();
    let nf = instances[0].steps[0].cols();
    let w = layout.w;
    let n = instances.len() * w;
    let steps = (0..seq_len)
        .map(|t| {
            let data: Vec<f64> = instances.iter().flat_map(|i| i.steps[t].data().iter().copied()).collect();
            Tensor::new(n, nf, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let adjacency = if with_adjacency {
        let mut a = Tensor::zeros(n, n);
        for (k, inst) in instances.iter().enumerate() {
            let block = &layout.norm[inst.batch];
            for r in 0..w {
                for c in 0..w {
                    a.set(k * w + r, k * w + c, block.get(r, c));
                }
            }
        }
        Some(a)
    } else {
        None
    };
    Ok(ModelInput { steps, adjacency })
}

/// Groups of instance indices of roughly `batch_nodes` nodes; a trailing
/// group too small for batch statistics is merged into its predecessor.
fn chunk(ids: &[usize], w: usize, batch_nodes: usize) -> Vec<Vec<usize>> {
    let per = (batch_nodes / w).max(1);
    let mut chunks: Vec<Vec<usize>> = ids.chunks(per).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() * w < 2) {
        let last = chunks.pop().expect("non-empty");
        chunks.last_mut().expect("non-empty").extend(last);
    }
    chunks
}

fn midpoint(class: usize, (lo, hi): (f64, f64)) -> f64 {
    match class {
        0 => lo / 2.0,
        1 => (lo + hi) / 2.0,
        _ => (hi + 100.0) / 2.0,
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best })
}

struct Trainer<'a> {
    spec: &'a ModelSpec,
    users: &'a [String],
    data: &'a TrialData,
    layout: &'a Layout,
    opts: TrainOptions,
}

impl Trainer<'_> {
    fn uses_adjacency(&self) -> bool {
        self.spec.kind == ModelKind::GcnLstm
    }

    fn mask_and_targets(&self, batch: &[&Instance], split: Split) -> Result<(Vec<bool>, Vec<f64>, Vec<usize>)> {
        let mut mask = Vec::new();
        let mut z = Vec::new();
        let mut classes = Vec::new();
        for inst in batch {
            for (r, t) in inst.role.iter().zip(&inst.target) {
                let on = *r == Role::In(split);
                mask.push(on);
                z.push(if on { (t - self.data.target_mean) / self.data.target_sd } else { 0.0 });
                classes.push(if on { bin_label_with(*t, self.opts.thresholds)?.class_id as usize } else { 0 });
            }
        }
        Ok((mask, z, classes))
    }

    fn loss(&self, tape: &mut Tape, out: crate::autodiff::Var, mask: &[bool], z: &[f64], classes: &[usize]) -> Result<crate::autodiff::Var> {
        match self.spec.head {
            Head::Regression => tape.mse_loss(out, z, mask),
            Head::Classification => tape.softmax_xent_loss(out, classes, mask),
        }
    }

    /// Summed loss and count over `split` nodes in eval mode.
    fn eval_loss(&self, model: &Model, ids: &[usize], split: Split) -> Result<f64> {
        let (mut total, mut count) = (0.0, 0usize);
        for c in chunk(ids, self.layout.w, self.opts.batch_nodes) {
            let batch: Vec<&Instance> = c.iter().map(|&i| &self.data.instances[i]).collect();
            let (mask, z, classes) = self.mask_and_targets(&batch, split)?;
            let k = mask.iter().filter(|m| **m).count();
            if k == 0 {
                continue;
            }
            let out = model.predict(&assemble(&batch, self.layout, self.uses_adjacency())?)?;
            let mut tape = Tape::new();
            let v = tape.constant(out);
            let l = self.loss(&mut tape, v, &mask, &z, &classes)?;
            total += tape.value(l).data()[0] * k as f64;
            count += k;
        }
        Ok(if count == 0 { f64::NAN } else { total / count as f64 })
    }

    /// Continuous score predictions in `[0, 100]` for `split` nodes, as
    /// `(instance, slot, prediction)`.
    fn predict(&self, model: &Model, ids: &[usize], split: Split) -> Result<Vec<(usize, usize, f64)>> {
        let mut out = Vec::new();
        let w = self.layout.w;
        for c in chunk(ids, w, self.opts.batch_nodes) {
            let batch: Vec<&Instance> = c.iter().map(|&i| &self.data.instances[i]).collect();
            let y = model.predict(&assemble(&batch, self.layout, self.uses_adjacency())?)?;
            for (k, &i) in c.iter().enumerate() {
                for slot in 0..w {
                    if self.data.instances[i].role[slot] != Role::In(split) {
                        continue;
                    }
                    let row = y.row(k * w + slot);
                    let score = match self.spec.head {
                        Head::Regression => (row[0] * self.data.target_sd + self.data.target_mean).clamp(0.0, 100.0),
                        Head::Classification => midpoint(argmax(row), self.opts.thresholds),
                    };
                    out.push((i, slot, score));
                }
            }
        }
        Ok(out)
    }

    fn f1_of(&self, preds: &[(usize, usize, f64)]) -> Result<f64> {
        let mut p = Vec::with_capacity(preds.len());
        let mut t = Vec::with_capacity(preds.len());
        for &(i, slot, score) in preds {
            p.push(bin_label_with(score, self.opts.thresholds)?.class_id);
            t.push(bin_label_with(self.data.instances[i].target[slot], self.opts.thresholds)?.class_id);
        }
        micro_f1(&p, &t)
    }

    fn run(&self, seed: u64) -> Result<ModelResult> {
        let mut model = Model::init(self.spec.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let ids_with = |s: Split| -> Vec<usize> { (0..self.data.instances.len()).filter(|&i| self.data.instances[i].has(s)).collect() };
        let (mut train_ids, val_ids, test_ids) = (ids_with(Split::Train), ids_with(Split::Val), ids_with(Split::Test));
        let mut stopper = EarlyStopper::new(self.opts.patience, self.opts.delta);
        let mut best = model.params.clone();
        let mut result = ModelResult {
            model: self.spec.kind,
            epochs: 0,
            best_epoch: 0,
            early_stopped: false,
            train_loss: vec![],
            val_loss: vec![],
            metrics: None,
            failure: None,
        };
        for epoch in 1..=self.opts.max_epochs {
            result.epochs = epoch;
            train_ids.shuffle(&mut rng);
            let (mut sum, mut steps) = (0.0, 0usize);
            for c in chunk(&train_ids, self.layout.w, self.opts.batch_nodes) {
                let batch: Vec<&Instance> = c.iter().map(|&i| &self.data.instances[i]).collect();
                let input = assemble(&batch, self.layout, self.uses_adjacency())?;
                let (mask, z, classes) = self.mask_and_targets(&batch, Split::Train)?;
                let mut tape = Tape::new();
                let out = model.forward(&mut tape, &input, Mode::Train, &mut rng)?;
                let loss = self.loss(&mut tape, out, &mask, &z, &classes)?;
                let lv = tape.value(loss).data()[0];
                if !lv.is_finite() {
                    result.failure = Some(TrialFailure { epoch, message: format!("non-finite training loss {lv}") });
                    return Ok(result);
                }
                tape.backward(loss)?;
                if let Err(e) = model.params.adam_step(&tape.param_grads(), &self.opts.adam) {
                    result.failure = Some(TrialFailure { epoch, message: e.to_string() });
                    return Ok(result);
                }
                sum += lv;
                steps += 1;
            }
            result.train_loss.push(sum / steps.max(1) as f64);
            let val = self.eval_loss(&model, &val_ids, Split::Val)?;
            if !val.is_finite() {
                result.failure = Some(TrialFailure { epoch, message: format!("non-finite validation loss {val}") });
                return Ok(result);
            }
            result.val_loss.push(val);
            let (improved, stop) = stopper.update(val);
            if improved {
                best = model.params.clone();
            }
            if stop {
                result.early_stopped = true;
                break;
            }
        }
        result.best_epoch = stopper.best_epoch;
        model.params = best;

        let test = self.predict(&model, &test_ids, Split::Test)?;
        let train = self.predict(&model, &train_ids, Split::Train)?;
        let rmse = (test
            .iter()
            .map(|&(i, s, p)| (p - self.data.instances[i].target[s]).powi(2))
            .sum::<f64>()
            / test.len() as f64)
            .sqrt();
        let mut groups: BTreeMap<(usize, usize), UserGroup> = BTreeMap::new();
        for &(i, s, p) in &test {
            let inst = &self.data.instances[i];
            let user = inst.user[s];
            let g = groups.entry((user, inst.batch)).or_insert_with(|| UserGroup {
                user: self.users[user].clone(),
                topology: self.layout.topology(inst.batch),
                pred: vec![],
                truth: vec![],
            });
            g.pred.push(p);
            g.truth.push(inst.target[s]);
        }
        let groups: Vec<UserGroup> = groups.into_values().collect();
        let (per_user, _) = rmse_per_user(&groups)?;
        result.metrics = Some(TestMetrics { micro_f1: self.f1_of(&test)?, rmse, train_micro_f1: self.f1_of(&train)?, per_user });
        Ok(result)
    }
}

fn model_seed(trial_seed: u64, kind: ModelKind) -> u64 {
    let k = ModelKind::ALL.iter().position(|x| *x == kind).unwrap_or(0) as u64;
    trial_seed.wrapping_mul(1_000_003).wrapping_add(k)
}

/// Trains every configured model kind on one split.
pub fn train_trial(cfg: &RunConfig, data: &ExperimentData, trial: usize) -> Result<TrialReport> {
    let layout = Layout::new(&data.graph, cfg.model.w)?;
    train_trial_with(cfg, data, &layout, trial)
}

fn train_trial_with(cfg: &RunConfig, data: &ExperimentData, layout: &Layout, trial: usize) -> Result<TrialReport> {
    let seed = cfg.train.seed.wrapping_add(trial as u64);
    let td = build_trial(data, layout, cfg.model.seq_len, cfg.data.target, cfg.train.split, seed)?;
    let opts = TrainOptions::from_config(cfg);
    let mut results = Vec::with_capacity(cfg.model.kinds.len());
    for &kind in &cfg.model.kinds {
        let mut spec = cfg.model.spec(kind, data.panel.n_features());
        spec.w = layout.w;
        let trainer = Trainer { spec: &spec, users: &data.panel.users, data: &td, layout, opts };
        results.push(trainer.run(model_seed(seed, kind))?);
    }
    Ok(TrialReport {
        trial,
        seed,
        n_train: td.n_train,
        n_val: td.n_val,
        n_test: td.n_test,
        instances: td.instances.len(),
        results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAggregate {
    pub model: ModelKind,
    pub trials_ok: usize,
    pub trials_failed: usize,
    pub f1_mean: f64,
    /// Sample standard deviation across trials (0 for a single trial).
    pub f1_sd: f64,
    pub rmse_mean: f64,
    pub rmse_sd: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    (mean, (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Mean and sample sd of F1 and RMSE per model over successful trials, in
/// order of first appearance.
pub fn aggregate(trials: &[TrialReport]) -> Vec<ModelAggregate> {
    let mut order: Vec<ModelKind> = Vec::new();
    for r in trials.iter().flat_map(|t| &t.results) {
        if !order.contains(&r.model) {
            order.push(r.model);
        }
    }
    order
        .into_iter()
        .map(|model| {
            let rs: Vec<&ModelResult> = trials.iter().flat_map(|t| &t.results).filter(|r| r.model == model).collect();
            let ok: Vec<&TestMetrics> = rs.iter().filter_map(|r| r.metrics.as_ref()).collect();
            let (f1_mean, f1_sd) = mean_sd(&ok.iter().map(|m| m.micro_f1).collect::<Vec<_>>());
            let (rmse_mean, rmse_sd) = mean_sd(&ok.iter().map(|m| m.rmse).collect::<Vec<_>>());
            ModelAggregate { model, trials_ok: ok.len(), trials_failed: rs.len() - ok.len(), f1_mean, f1_sd, rmse_mean, rmse_sd }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub target: Target,
    pub w: usize,
    pub seq_len: usize,
    pub aggregates: Vec<ModelAggregate>,
    pub trials: Vec<TrialReport>,
}

impl ExperimentReport {
    pub fn aggregate_for(&self, model: ModelKind) -> Option<&ModelAggregate> {
        self.aggregates.iter().find(|a| a.model == model)
    }

    /// Per-trial test F1 of one model, in trial order, failed trials omitted.
    pub fn f1_by_trial(&self, model: ModelKind) -> Vec<f64> {
        self.trials
            .iter()
            .flat_map(|t| &t.results)
            .filter(|r| r.model == model)
            .filter_map(|r| r.metrics.as_ref().map(|m| m.micro_f1))
            .collect()
    }
}

/// Runs `cfg.train.trials` trials (in parallel) with seeds `seed + trial`.
pub fn run_experiment(cfg: &RunConfig, data: &ExperimentData) -> Result<ExperimentReport> {
    cfg.validate()?;
    let layout = Layout::new(&data.graph, cfg.model.w)?;
    let trials = (0..cfg.train.trials)
        .into_par_iter()
        .map(|t| train_trial_with(cfg, data, &layout, t))
        .collect::<Result<Vec<_>>>()?;
    let aggregates = aggregate(&trials);
    if aggregates.iter().all(|a| a.trials_ok == 0) {
        return Err(Error::Data("every trial failed".into()));
    }
    Ok(ExperimentReport { target: cfg.data.target, w: cfg.model.w, seq_len: cfg.model.seq_len, aggregates, trials })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: usize,
    pub report: ExperimentReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub vary: SweepAxis,
    pub points: Vec<SweepPoint>,
}

/// One experiment per value of the swept axis, the other held fixed.
pub fn sweep(cfg: &RunConfig, data: &ExperimentData) -> Result<SweepReport> {
    cfg.validate()?;
    if cfg.sweep.values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let points = cfg
        .sweep
        .values
        .iter()
        .map(|&x| {
            let mut c = cfg.clone();
            match cfg.sweep.vary {
                SweepAxis::GraphSize => c.model.w = x,
                SweepAxis::SeqLen => c.model.seq_len = x,
            }
            Ok(SweepPoint { x, report: run_experiment(&c, data)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { vary: cfg.sweep.vary, points })
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    x: usize,
    model: &'a str,
    f1_mean: f64,
    f1_sd: f64,
    rmse_mean: f64,
    rmse_sd: f64,
}

/// Writes `x,model,f1_mean,f1_sd,rmse_mean,rmse_sd`, one row per point and model.
pub fn write_summary_csv<W: Write>(points: &[(usize, &[ModelAggregate])], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for (x, aggs) in points {
        for a in aggs.iter() {
            wtr.serialize(CsvRow {
                x: *x,
                model: a.model.as_str(),
                f1_mean: a.f1_mean,
                f1_sd: a.f1_sd,
                rmse_mean: a.rmse_mean,
                rmse_sd: a.rmse_sd,
            })?;
        }
    }
    wtr.flush()?;
    Ok(())
}

impl SweepReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let rows: Vec<(usize, &[ModelAggregate])> = self.points.iter().map(|p| (p.x, p.report.aggregates.as_slice())).collect();
        write_summary_csv(&rows, out)
    }
}
