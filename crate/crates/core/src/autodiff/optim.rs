use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Param {
    value: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named parameters with their Adam moments, plus non-trainable buffers
/// (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Tensor>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let (r, c) = value.shape();
        self.params.insert(name.to_string(), Param { value, m: Tensor::zeros(r, c), v: Tensor::zeros(r, c) });
    }

    /// Glorot-uniform `rows x cols` weight.
    pub fn init_glorot(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
        self.insert(name, Tensor::new(rows, cols, data).expect("glorot shape"));
    }

    pub fn init_filled(&mut self, name: &str, rows: usize, cols: usize, value: f64) {
        self.insert(name, Tensor::filled(rows, cols, value));
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).map(|p| &p.value).ok_or_else(|| Error::pre(format!("unknown parameter `{name}`")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value).ok_or_else(|| Error::pre(format!("unknown parameter `{name}`")))
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        self.params.get(name).map(|p| (&p.m, &p.v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) {
        self.buffers.insert(name.to_string(), value);
    }

    /// One bias-corrected Adam update. Parameters missing from `grads` are
    /// treated as having zero gradient. Nothing is modified if any gradient is
    /// non-finite or misshapen.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads {
            let p = self.params.get(name).ok_or_else(|| Error::pre(format!("gradient for unknown parameter `{name}`")))?;
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adam_step", format!("`{name}`: gradient {:?} vs {:?}", g.shape(), p.value.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let Some(g) = grads.get(name) else {
                // zero gradient: moments decay, update is m̂ / (√v̂ + eps)
                for i in 0..p.value.len() {
                    let m = cfg.beta1 * p.m.data()[i];
                    let v = cfg.beta2 * p.v.data()[i];
                    p.m.data_mut()[i] = m;
                    p.v.data_mut()[i] = v;
                    p.value.data_mut()[i] -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
                }
                continue;
            };
            for (i, gi) in g.data().iter().enumerate() {
                let m = cfg.beta1 * p.m.data()[i] + (1.0 - cfg.beta1) * gi;
                let v = cfg.beta2 * p.v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                p.value.data_mut()[i] -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Writes a JSON index and a little-endian `f64` blob. For each parameter
    /// the blob holds value, first moment and second moment; buffers follow.
    pub fn write_checkpoint<W1: Write, W2: Write>(&self, index: W1, mut blob: W2) -> Result<()> {
        let mut entries = Vec::new();
        let mut offset = 0usize;
        let mut emit = |name: &str, kind: &str, t: &Tensor, blob: &mut W2| -> Result<()> {
            entries.push(CheckpointEntry { name: name.to_string(), kind: kind.to_string(), shape: [t.rows(), t.cols()], offset });
            for v in t.data() {
                blob.write_all(&v.to_le_bytes())?;
            }
            offset += t.len();
            Ok(())
        };
        for (name, p) in &self.params {
            emit(name, "value", &p.value, &mut blob)?;
            emit(name, "m", &p.m, &mut blob)?;
            emit(name, "v", &p.v, &mut blob)?;
        }
        for (name, b) in &self.buffers {
            emit(name, "buffer", b, &mut blob)?;
        }
        blob.flush()?;
        serde_json::to_writer_pretty(index, &CheckpointIndex { step: self.step, entries })?;
        Ok(())
    }

    pub fn read_checkpoint<R1: Read, R2: Read>(index: R1, mut blob: R2) -> Result<ParamStore> {
        let idx: CheckpointIndex = serde_json::from_reader(index)?;
        let mut bytes = Vec::new();
        blob.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Data("checkpoint blob length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let mut store = ParamStore { step: idx.step, ..ParamStore::default() };
        for e in idx.entries {
            let n = e.shape[0] * e.shape[1];
            let slice = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Data(format!("checkpoint entry `{}` exceeds blob", e.name)))?;
            let t = Tensor::new(e.shape[0], e.shape[1], slice.to_vec())?;
            match e.kind.as_str() {
                "value" => store.insert(&e.name, t),
                "m" | "v" => {
                    let p = store
                        .params
                        .get_mut(&e.name)
                        .ok_or_else(|| Error::Data(format!("moment before value for `{}`", e.name)))?;
                    if e.kind == "m" {
                        p.m = t;
                    } else {
                        p.v = t;
                    }
                }
                "buffer" => store.set_buffer(&e.name, t),
                other => return Err(Error::Data(format!("unknown checkpoint entry kind `{other}`"))),
            }
        }
        Ok(store)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    kind: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    step: u64,
    entries: Vec<CheckpointEntry>,
}
