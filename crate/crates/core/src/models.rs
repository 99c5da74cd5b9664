//! GCN-LSTM, CONV-LSTM and LSTM-only predictors.
//!
//! All three share the same head: batch normalization over the fused node
//! representation, a stack of dense + ReLU + dropout layers, and a linear
//! output (one score for regression, three logits for classification). Nodes
//! are rows; several subgraphs can be stacked into one block-diagonal batch.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    batchnorm_forward, conv1d_features, dense_forward, dropout, gcn_layer_forward, lstm_unroll, Activation, BatchNormState,
    LstmParams, Mode, ParamStore, Tape, Tensor, Var,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    GcnLstm,
    ConvLstm,
    Lstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::GcnLstm, ModelKind::ConvLstm, ModelKind::Lstm];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::GcnLstm => "gcn-lstm",
            ModelKind::ConvLstm => "conv-lstm",
            ModelKind::Lstm => "lstm",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn-lstm" => Ok(ModelKind::GcnLstm),
            "conv-lstm" => Ok(ModelKind::ConvLstm),
            "lstm" => Ok(ModelKind::Lstm),
            other => Err(Error::Config(format!("unknown model `{other}` (expected gcn-lstm|conv-lstm|lstm)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Regression,
    Classification,
}

/// Which slice of the window feeds the GCN branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GcnInput {
    LastDay,
    WindowMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Graph size.
    pub w: usize,
    pub seq_len: usize,
    pub feature_dim: usize,
    pub gcn_layers: Vec<usize>,
    pub lstm_hidden: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub dense_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub head: Head,
    pub gcn_input: GcnInput,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, w: usize, seq_len: usize, feature_dim: usize) -> ModelSpec {
        ModelSpec {
            kind,
            w,
            seq_len,
            feature_dim,
            gcn_layers: vec![64, 32],
            lstm_hidden: 64,
            conv_channels: 4,
            conv_kernel: 3,
            dense_widths: vec![64, 32],
            dropout_rate: 0.3,
            head: Head::Regression,
            gcn_input: GcnInput::LastDay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.w == 0 {
            return bad("graph size w must be at least 1".into());
        }
        if self.seq_len == 0 {
            return bad("sequence length must be at least 1".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1".into());
        }
        if self.kind == ModelKind::GcnLstm && self.gcn_layers.is_empty() {
            return bad("gcn-lstm needs at least one GCN layer".into());
        }
        if self.lstm_hidden == 0 || self.gcn_layers.contains(&0) || self.dense_widths.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.kind == ModelKind::ConvLstm {
            if self.conv_channels == 0 || self.conv_kernel == 0 {
                return bad("conv channels and kernel must be positive".into());
            }
            if self.conv_kernel > self.feature_dim {
                return bad(format!("conv kernel {} exceeds feature_dim {}", self.conv_kernel, self.feature_dim));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate must be in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    pub fn outputs(&self) -> usize {
        match self.head {
            Head::Regression => 1,
            Head::Classification => 3,
        }
    }

    fn lstm_input_dim(&self) -> usize {
        match self.kind {
            ModelKind::ConvLstm => (self.feature_dim - self.conv_kernel + 1) * self.conv_channels,
            _ => self.feature_dim,
        }
    }

    fn fused_dim(&self) -> usize {
        match self.kind {
            ModelKind::GcnLstm => self.gcn_layers.last().copied().unwrap_or(0) + self.lstm_hidden,
            _ => self.lstm_hidden,
        }
    }
}

/// Node-level inputs for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// One `[nodes, feature_dim]` matrix per day, oldest first.
    pub steps: Vec<Tensor>,
    /// `[nodes, nodes]` normalized adjacency; needed by gcn-lstm only.
    pub adjacency: Option<Tensor>,
}

impl ModelInput {
    pub fn nodes(&self) -> usize {
        self.steps.first().map(Tensor::rows).unwrap_or(0)
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.steps.len() != spec.seq_len {
            return Err(Error::shape("model input", format!("{} steps for sequence length {}", self.steps.len(), spec.seq_len)));
        }
        let n = self.nodes();
        if n == 0 {
            return Err(Error::shape("model input", "no nodes"));
        }
        if let Some(s) = self.steps.iter().find(|s| s.shape() != (n, spec.feature_dim)) {
            return Err(Error::shape("model input", format!("step {:?}, expected ({n}, {})", s.shape(), spec.feature_dim)));
        }
        if spec.kind == ModelKind::GcnLstm {
            match &self.adjacency {
                Some(a) if a.shape() == (n, n) => {}
                Some(a) => return Err(Error::shape("model input", format!("adjacency {:?} for {n} nodes", a.shape()))),
                None => return Err(Error::shape("model input", "gcn-lstm needs an adjacency")),
            }
        }
        Ok(())
    }
}

fn init_params(spec: &ModelSpec, rng: &mut impl Rng) -> ParamStore {
    let mut store = ParamStore::new();
    if spec.kind == ModelKind::GcnLstm {
        let mut prev = spec.feature_dim;
        for (i, &width) in spec.gcn_layers.iter().enumerate() {
            store.init_glorot(&format!("gcn.{i}.theta"), prev, width, rng);
            prev = width;
        }
    }
    if spec.kind == ModelKind::ConvLstm {
        store.init_glorot("conv.kernel", spec.conv_kernel, spec.conv_channels, rng);
        store.init_filled("conv.bias", 1, spec.conv_channels, 0.0);
    }
    LstmParams::init(&mut store, "lstm", spec.lstm_input_dim(), spec.lstm_hidden, rng);
    let fused = spec.fused_dim();
    store.init_filled("bn.gamma", 1, fused, 1.0);
    store.init_filled("bn.beta", 1, fused, 0.0);
    BatchNormState::new(fused).save(&mut store, "bn");
    let mut prev = fused;
    for (i, &width) in spec.dense_widths.iter().enumerate() {
        store.init_glorot(&format!("dense.{i}.w"), prev, width, rng);
        store.init_filled(&format!("dense.{i}.b"), 1, width, 0.0);
        prev = width;
    }
    store.init_glorot("out.w", prev, spec.outputs(), rng);
    store.init_filled("out.b", 1, spec.outputs(), 0.0);
    store
}

fn step_vars(tape: &mut Tape, input: &ModelInput) -> Vec<Var> {
    input.steps.iter().map(|s| tape.constant(s.clone())).collect()
}

/// GCN stack over the most recent day (or the window mean).
fn gcn_branch(tape: &mut Tape, store: &ParamStore, spec: &ModelSpec, input: &ModelInput) -> Result<Var> {
    let x = match spec.gcn_input {
        GcnInput::LastDay => input.steps[spec.seq_len - 1].clone(),
        GcnInput::WindowMean => {
            let mut acc = Tensor::zeros(input.nodes(), spec.feature_dim);
            for s in &input.steps {
                acc.add_assign(s);
            }
            acc.map(|v| v / spec.seq_len as f64)
        }
    };
    let adjacency = input.adjacency.as_ref().ok_or_else(|| Error::shape("gcn branch", "missing adjacency"))?;
    let adj = tape.constant(adjacency.clone());
    let mut h = tape.constant(x);
    for i in 0..spec.gcn_layers.len() {
        let theta = tape.param(store, &format!("gcn.{i}.theta"))?;
        h = gcn_layer_forward(tape, h, adj, theta, Activation::Relu)?;
    }
    Ok(h)
}

fn head(tape: &mut Tape, store: &ParamStore, spec: &ModelSpec, fused: Var, bn: &mut BatchNormState, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
    let gamma = tape.param(store, "bn.gamma")?;
    let beta = tape.param(store, "bn.beta")?;
    let mut h = batchnorm_forward(tape, fused, gamma, beta, bn, mode)?;
    for i in 0..spec.dense_widths.len() {
        let w = tape.param(store, &format!("dense.{i}.w"))?;
        let b = tape.param(store, &format!("dense.{i}.b"))?;
        h = dense_forward(tape, h, w, b, Activation::Relu)?;
        h = dropout(tape, h, spec.dropout_rate, mode, rng)?;
    }
    let w = tape.param(store, "out.w")?;
    let b = tape.param(store, "out.b")?;
    dense_forward(tape, h, w, b, Activation::Identity)
}

/// GCN branch and shared-weight LSTM fused by concatenation.
pub fn forward_gcn_lstm(
    tape: &mut Tape,
    store: &ParamStore,
    spec: &ModelSpec,
    input: &ModelInput,
    bn: &mut BatchNormState,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    input.check(spec)?;
    let g = gcn_branch(tape, store, spec, input)?;
    let steps = step_vars(tape, input);
    let lstm = LstmParams::load(tape, store, "lstm")?;
    let h = lstm_unroll(tape, &steps, &lstm)?;
    let fused = tape.concat_cols(&[g, h])?;
    head(tape, store, spec, fused, bn, mode, rng)
}

/// Per-day convolution across the feature axis, then the LSTM.
pub fn forward_conv_lstm(
    tape: &mut Tape,
    store: &ParamStore,
    spec: &ModelSpec,
    input: &ModelInput,
    bn: &mut BatchNormState,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    input.check(spec)?;
    let kernel = tape.param(store, "conv.kernel")?;
    let bias = tape.param(store, "conv.bias")?;
    let mut steps = Vec::with_capacity(spec.seq_len);
    for x in step_vars(tape, input) {
        let c = conv1d_features(tape, x, kernel, bias)?;
        steps.push(tape.relu(c));
    }
    let lstm = LstmParams::load(tape, store, "lstm")?;
    let h = lstm_unroll(tape, &steps, &lstm)?;
    head(tape, store, spec, h, bn, mode, rng)
}

pub fn forward_lstm(
    tape: &mut Tape,
    store: &ParamStore,
    spec: &ModelSpec,
    input: &ModelInput,
    bn: &mut BatchNormState,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    input.check(spec)?;
    let steps = step_vars(tape, input);
    let lstm = LstmParams::load(tape, store, "lstm")?;
    let h = lstm_unroll(tape, &steps, &lstm)?;
    head(tape, store, spec, h, bn, mode, rng)
}

/// A model specification together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

impl Model {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&spec, &mut rng);
        Ok(Model { spec, params })
    }

    /// Records a forward pass and returns the `[nodes, outputs]` result. In
    /// training mode the batch-norm running statistics are updated.
    pub fn forward(&mut self, tape: &mut Tape, input: &ModelInput, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        let mut bn = BatchNormState::load(&self.params, "bn")?;
        let out = match self.spec.kind {
            ModelKind::GcnLstm => forward_gcn_lstm(tape, &self.params, &self.spec, input, &mut bn, mode, rng)?,
            ModelKind::ConvLstm => forward_conv_lstm(tape, &self.params, &self.spec, input, &mut bn, mode, rng)?,
            ModelKind::Lstm => forward_lstm(tape, &self.params, &self.spec, input, &mut bn, mode, rng)?,
        };
        if mode == Mode::Train {
            bn.save(&mut self.params, "bn");
        }
        Ok(out)
    }

    /// Eval-mode outputs, `[nodes, outputs]`.
    pub fn predict(&self, input: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut scratch = self.clone();
        // eval mode draws no random numbers
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = scratch.forward(&mut tape, input, Mode::Eval, &mut rng)?;
        Ok(tape.value(out).clone())
    }

    /// Writes `spec.json`, `params.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("spec.json"), serde_json::to_vec_pretty(&self.spec)?)?;
        self.params
            .write_checkpoint(fs::File::create(dir.join("params.json"))?, std::io::BufWriter::new(fs::File::create(dir.join("params.bin"))?))
    }

    pub fn load(dir: &Path) -> Result<Model> {
        let spec: ModelSpec = serde_json::from_slice(&fs::read(dir.join("spec.json"))?)?;
        spec.validate()?;
        let params = ParamStore::read_checkpoint(fs::File::open(dir.join("params.json"))?, fs::File::open(dir.join("params.bin"))?)?;
        Ok(Model { spec, params })
    }
}
