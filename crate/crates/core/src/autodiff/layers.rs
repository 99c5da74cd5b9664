use rand::Rng;
use serde::{Deserialize, Serialize};

use super::optim::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `activation(x·W + b)`.
pub fn dense_forward(tape: &mut Tape, x: Var, w: Var, b: Var, activation: Activation) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let z = tape.add_row(xw, b)?;
    Ok(activation.apply(tape, z))
}

/// `activation(Â·H·Θ)` with `Â` the normalized adjacency held as a constant.
pub fn gcn_layer_forward(tape: &mut Tape, h: Var, norm_adj: Var, theta: Var, activation: Activation) -> Result<Var> {
    let (n, m) = tape.value(norm_adj).shape();
    if n != m || n != tape.value(h).rows() {
        return Err(Error::shape("gcn_layer_forward", format!("adjacency {n}x{m} with {} node rows", tape.value(h).rows())));
    }
    let ht = tape.matmul(h, theta)?;
    let z = tape.matmul(norm_adj, ht)?;
    Ok(activation.apply(tape, z))
}

/// Fused LSTM weights; gate column order is input, forget, output, candidate.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    /// `[f, 4H]`
    pub wx: Var,
    /// `[H, 4H]`
    pub wh: Var,
    /// `[1, 4H]`
    pub b: Var,
    pub hidden: usize,
}

impl LstmParams {
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) {
        store.init_glorot(&format!("{prefix}.wx"), input, 4 * hidden, rng);
        store.init_glorot(&format!("{prefix}.wh"), hidden, 4 * hidden, rng);
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].fill(1.0);
        store.insert(&format!("{prefix}.b"), Tensor::row_vector(b));
    }

    pub fn load(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<LstmParams> {
        let wx = tape.param(store, &format!("{prefix}.wx"))?;
        let wh = tape.param(store, &format!("{prefix}.wh"))?;
        let b = tape.param(store, &format!("{prefix}.b"))?;
        let hidden = tape.value(wh).rows();
        Ok(LstmParams { wx, wh, b, hidden })
    }
}

/// One LSTM step, returning `(h_t, c_t)`.
pub fn lstm_step(tape: &mut Tape, x: Var, h_prev: Var, c_prev: Var, p: &LstmParams) -> Result<(Var, Var)> {
    let hd = p.hidden;
    if tape.value(h_prev).shape() != (tape.value(x).rows(), hd) || tape.value(c_prev).shape() != tape.value(h_prev).shape() {
        return Err(Error::shape("lstm_step", format!("state {:?} for batch {} hidden {hd}", tape.value(h_prev).shape(), tape.value(x).rows())));
    }
    let zx = tape.matmul(x, p.wx)?;
    let zh = tape.matmul(h_prev, p.wh)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_row(z, p.b)?;
    let zi = tape.slice_cols(z, 0, hd)?;
    let zf = tape.slice_cols(z, hd, 2 * hd)?;
    let zo = tape.slice_cols(z, 2 * hd, 3 * hd)?;
    let zg = tape.slice_cols(z, 3 * hd, 4 * hd)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let o = tape.sigmoid(zo);
    let g = tape.tanh(zg);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Runs the LSTM over `steps` (each `[batch, f]`) from zero state and returns
/// the final hidden state.
pub fn lstm_unroll(tape: &mut Tape, steps: &[Var], p: &LstmParams) -> Result<Var> {
    let Some(first) = steps.first() else {
        return Err(Error::shape("lstm_unroll", "empty sequence"));
    };
    let batch = tape.value(*first).rows();
    let mut h = tape.constant(Tensor::zeros(batch, p.hidden));
    let mut c = tape.constant(Tensor::zeros(batch, p.hidden));
    for &x in steps {
        (h, c) = lstm_step(tape, x, h, c, p)?;
    }
    Ok(h)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(features: usize) -> BatchNormState {
        BatchNormState { running_mean: vec![0.0; features], running_var: vec![1.0; features] }
    }

    pub fn load(store: &ParamStore, prefix: &str) -> Result<BatchNormState> {
        let get = |suffix: &str| {
            store
                .buffer(&format!("{prefix}.{suffix}"))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::pre(format!("missing buffer `{prefix}.{suffix}`")))
        };
        Ok(BatchNormState { running_mean: get("running_mean")?, running_var: get("running_var")? })
    }

    pub fn save(&self, store: &mut ParamStore, prefix: &str) {
        store.set_buffer(&format!("{prefix}.running_mean"), Tensor::row_vector(self.running_mean.clone()));
        store.set_buffer(&format!("{prefix}.running_var"), Tensor::row_vector(self.running_var.clone()));
    }
}

/// Batch normalization with learnable `gamma`/`beta` rows. Training mode uses
/// batch statistics and updates `state`; eval mode uses `state`.
pub fn batchnorm_forward(tape: &mut Tape, x: Var, gamma: Var, beta: Var, state: &mut BatchNormState, mode: Mode) -> Result<Var> {
    let xhat = match mode {
        Mode::Train => {
            let (xhat, mean, var) = tape.batch_normalize(x, BN_EPS)?;
            for (r, m) in state.running_mean.iter_mut().zip(&mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in state.running_var.iter_mut().zip(&var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
            xhat
        }
        Mode::Eval => tape.fixed_normalize(x, &state.running_mean, &state.running_var, BN_EPS)?,
    };
    let scaled = tape.mul_row(xhat, gamma)?;
    tape.add_row(scaled, beta)
}

/// Inverted dropout: in training, zeroes each element with probability `rate`
/// and scales survivors by `1 / (1 − rate)`.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let (r, c) = tape.value(x).shape();
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..r * c).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
    tape.mul_const(x, Tensor::new(r, c, mask)?)
}

/// Valid 1-D convolution along the feature axis of `x` (`[n, F]`), with
/// `kernel` `[k, C]` and `bias` `[1, C]`. Output is `[n, (F−k+1)·C]`,
/// position-major.
pub fn conv1d_features(tape: &mut Tape, x: Var, kernel: Var, bias: Var) -> Result<Var> {
    let n = tape.value(x).rows();
    let f = tape.value(x).cols();
    let (k, channels) = tape.value(kernel).shape();
    let cols = tape.im2col(x, k)?;
    let z = tape.matmul(cols, kernel)?;
    let z = tape.add_row(z, bias)?;
    tape.reshape(z, n, (f - k + 1) * channels)
}
