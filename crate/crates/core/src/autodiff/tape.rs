use std::collections::{BTreeMap, HashMap};

use super::optim::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Tensor),
    MulRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    ConcatCols(Vec<usize>),
    SliceCols { src: usize, start: usize },
    Reshape(usize),
    Im2Col { src: usize, kernel: usize },
    BatchNormTrain { src: usize, inv_std: Vec<f64> },
    BatchNormEval { src: usize, inv_std: Vec<f64> },
    Mse { pred: usize, diff: Vec<f64>, count: usize },
    Xent { logits: usize, probs: Tensor, classes: Vec<usize>, mask: Vec<bool>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Build a forward pass with the op methods, then call
/// [`Tape::backward`] on a `1 x 1` loss.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: HashMap<String, Var>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Data that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records the named parameter once per tape.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::shape("matmul", format!("{:?} · {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.matmul(tb);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::MatMul(a.0, b.0), rg))
    }

    /// `x + b` with `b` a `1 x m` row broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let mut out = tx.clone();
        let m = tx.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % m];
        }
        let rg = self.rg(x.0) || self.rg(b.0);
        Ok(self.push(out, Op::AddRow(x.0, b.0), rg))
    }

    /// `x * r` with `r` a `1 x m` row broadcast over the rows of `x`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(r));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(Error::shape("mul_row", format!("{:?} * {:?}", tx.shape(), tr.shape())));
        }
        let mut out = tx.clone();
        let m = tx.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= tr.data()[i % m];
        }
        let rg = self.rg(x.0) || self.rg(r.0);
        Ok(self.push(out, Op::MulRow(x.0, r.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Sub(a.0, b.0), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    /// Elementwise product with fixed data (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        check_same("mul_const", self.value(x), &c)?;
        let out = self.value(x).zip_map(&c, |a, b| a * b);
        let rg = self.rg(x.0);
        Ok(self.push(out, Op::MulConst(x.0, c), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x.0);
        self.push(out, Op::Scale(x.0, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x.0);
        self.push(out, Op::Relu(x.0), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(x.0);
        self.push(out, Op::Tanh(x.0), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x.0);
        self.push(out, Op::Sigmoid(x.0), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let n = self.value(*first).rows();
        if parts.iter().any(|p| self.value(*p).rows() != n) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let out = Tensor::new(n, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if start >= end || end > tx.cols() {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {} columns", tx.cols())));
        }
        let mut data = Vec::with_capacity(tx.rows() * (end - start));
        for r in 0..tx.rows() {
            data.extend_from_slice(&tx.row(r)[start..end]);
        }
        let out = Tensor::new(tx.rows(), end - start, data)?;
        let rg = self.rg(x.0);
        Ok(self.push(out, Op::SliceCols { src: x.0, start }, rg))
    }

    /// Row-major reinterpretation.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshaped(rows, cols)?;
        let rg = self.rg(x.0);
        Ok(self.push(out, Op::Reshape(x.0), rg))
    }

    /// Sliding windows along columns: `[n, F]` becomes `[n·(F−k+1), k]`, row
    /// `i·P + p` holding `x[i, p..p+k]`.
    pub fn im2col(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let tx = self.value(x);
        if kernel == 0 || kernel > tx.cols() {
            return Err(Error::shape("im2col", format!("kernel {kernel} over {} columns", tx.cols())));
        }
        let positions = tx.cols() - kernel + 1;
        let mut data = Vec::with_capacity(tx.rows() * positions * kernel);
        for r in 0..tx.rows() {
            let row = tx.row(r);
            for p in 0..positions {
                data.extend_from_slice(&row[p..p + kernel]);
            }
        }
        let out = Tensor::new(tx.rows() * positions, kernel, data)?;
        let rg = self.rg(x.0);
        Ok(self.push(out, Op::Im2Col { src: x.0, kernel }, rg))
    }

    /// `(x − mean) / sqrt(var + eps)` per column using batch statistics.
    /// Returns the output and the batch mean and (population) variance.
    pub fn batch_normalize(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let tx = self.value(x);
        let (n, m) = tx.shape();
        if n < 2 {
            return Err(Error::pre(format!("batch normalization in training mode needs at least 2 rows, got {n}")));
        }
        let mean = tx.column_sums().into_data().into_iter().map(|s| s / n as f64).collect::<Vec<_>>();
        let mut var = vec![0.0; m];
        for r in 0..n {
            for (c, v) in tx.row(r).iter().enumerate() {
                var[c] += (v - mean[c]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = Tensor::new(n, m, tx.data().iter().enumerate().map(|(i, v)| (v - mean[i % m]) * inv_std[i % m]).collect())?;
        let rg = self.rg(x.0);
        let v = self.push(out, Op::BatchNormTrain { src: x.0, inv_std }, rg);
        Ok((v, mean, var))
    }

    /// Normalization with fixed statistics.
    pub fn fixed_normalize(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let m = tx.cols();
        if mean.len() != m || var.len() != m {
            return Err(Error::shape("fixed_normalize", format!("{m} columns, {} statistics", mean.len())));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = Tensor::new(tx.rows(), m, tx.data().iter().enumerate().map(|(i, v)| (v - mean[i % m]) * inv_std[i % m]).collect())?;
        let rg = self.rg(x.0);
        Ok(self.push(out, Op::BatchNormEval { src: x.0, inv_std }, rg))
    }

    /// Mean squared error over rows with `mask[i] == true`. `pred` is `n x 1`.
    pub fn mse_loss(&mut self, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let tp = self.value(pred);
        if tp.cols() != 1 || tp.rows() != target.len() || mask.len() != target.len() {
            return Err(Error::shape("mse_loss", format!("pred {:?}, {} targets, {} mask", tp.shape(), target.len(), mask.len())));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::pre("every entry is masked"));
        }
        let diff: Vec<f64> =
            tp.data().iter().zip(target).zip(mask).map(|((p, t), m)| if *m { p - t } else { 0.0 }).collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / count as f64;
        let rg = self.rg(pred.0);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred: pred.0, diff, count }, rg))
    }

    /// Mean negative log-softmax of the true class over unmasked rows.
    pub fn softmax_xent_loss(&mut self, logits: Var, classes: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, k) = tl.shape();
        if n != classes.len() || mask.len() != n {
            return Err(Error::shape("softmax_xent_loss", format!("logits {:?}, {} classes, {} mask", tl.shape(), classes.len(), mask.len())));
        }
        if let Some(c) = classes.iter().find(|c| **c >= k) {
            return Err(Error::pre(format!("class {c} out of range for {k} logits")));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::pre("every entry is masked"));
        }
        let mut probs = Tensor::zeros(n, k);
        let mut loss = 0.0;
        for r in 0..n {
            let row = tl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (c, v) in row.iter().enumerate() {
                probs.set(r, c, (v - max).exp() / z);
            }
            if mask[r] {
                loss -= row[classes[r]] - max - z.ln();
            }
        }
        let rg = self.rg(logits.0);
        let op = Op::Xent { logits: logits.0, probs, classes: classes.to_vec(), mask: mask.to_vec(), count };
        Ok(self.push(Tensor::scalar(loss / count as f64), op, rg))
    }

    fn accumulate(&mut self, idx: usize, g: Tensor) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut self.grads[idx] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Populates gradients of `loss` (which must be `1 x 1`) for every node
    /// that depends on a differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape("backward", format!("loss has shape {:?}", self.value(loss).shape())));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            // Ops hold indices only, so borrow the node immutably while computing
            // contributions and apply them afterwards.
            let contributions = self.local_grads(idx, &g);
            self.grads[idx] = Some(g);
            for (target, contrib) in contributions {
                self.accumulate(target, contrib);
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut out = vec![];
                if self.rg(*a) {
                    out.push((*a, g.matmul_t(val(*b))));
                }
                if self.rg(*b) {
                    out.push((*b, val(*a).t_matmul(g)));
                }
                out
            }
            Op::AddRow(x, b) => vec![(*x, g.clone()), (*b, g.column_sums())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![(*a, g.zip_map(val(*b), |x, y| x * y)), (*b, g.zip_map(val(*a), |x, y| x * y))],
            Op::MulConst(x, c) => vec![(*x, g.zip_map(c, |x, y| x * y))],
            Op::MulRow(x, r) => {
                let m = g.cols();
                let row = val(*r).data();
                let mut gx = g.clone();
                for (i, v) in gx.data_mut().iter_mut().enumerate() {
                    *v *= row[i % m];
                }
                let gr = g.zip_map(val(*x), |a, b| a * b).column_sums();
                vec![(*x, gx), (*r, gr)]
            }
            Op::Scale(x, s) => vec![(*x, g.map(|v| v * s))],
            Op::Relu(x) => vec![(*x, g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }))],
            Op::Tanh(x) => vec![(*x, g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y)))],
            Op::Sigmoid(x) => vec![(*x, g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y)))],
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = val(p).cols();
                    let mut data = Vec::with_capacity(g.rows() * w);
                    for r in 0..g.rows() {
                        data.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    out.push((p, Tensor::new(g.rows(), w, data).expect("concat split")));
                    offset += w;
                }
                out
            }
            Op::SliceCols { src, start } => {
                let mut gs = Tensor::zeros(val(*src).rows(), val(*src).cols());
                for r in 0..g.rows() {
                    for (c, v) in g.row(r).iter().enumerate() {
                        gs.set(r, start + c, *v);
                    }
                }
                vec![(*src, gs)]
            }
            Op::Reshape(src) => {
                let (r, c) = val(*src).shape();
                vec![(*src, g.clone().reshaped(r, c).expect("reshape back"))]
            }
            Op::Im2Col { src, kernel } => {
                let (n, f) = val(*src).shape();
                let positions = f - kernel + 1;
                let mut gs = Tensor::zeros(n, f);
                for i in 0..n {
                    for p in 0..positions {
                        for (j, v) in g.row(i * positions + p).iter().enumerate() {
                            let cur = gs.get(i, p + j);
                            gs.set(i, p + j, cur + v);
                        }
                    }
                }
                vec![(*src, gs)]
            }
            Op::BatchNormTrain { src, inv_std } => {
                let (n, m) = g.shape();
                let xhat = &node.value;
                let sum_g = g.column_sums();
                let sum_gx = g.zip_map(xhat, |a, b| a * b).column_sums();
                let mut gx = Tensor::zeros(n, m);
                for r in 0..n {
                    for c in 0..m {
                        let v = inv_std[c] / n as f64
                            * (n as f64 * g.get(r, c) - sum_g.data()[c] - xhat.get(r, c) * sum_gx.data()[c]);
                        gx.set(r, c, v);
                    }
                }
                vec![(*src, gx)]
            }
            Op::BatchNormEval { src, inv_std } => {
                let m = g.cols();
                let mut gx = g.clone();
                for (i, v) in gx.data_mut().iter_mut().enumerate() {
                    *v *= inv_std[i % m];
                }
                vec![(*src, gx)]
            }
            Op::Mse { pred, diff, count } => {
                let s = g.data()[0] * 2.0 / *count as f64;
                vec![(*pred, Tensor::column(diff.iter().map(|d| d * s).collect()))]
            }
            Op::Xent { logits, probs, classes, mask, count } => {
                let s = g.data()[0] / *count as f64;
                let mut gl = probs.clone();
                for r in 0..gl.rows() {
                    for c in 0..gl.cols() {
                        let v = if mask[r] { (gl.get(r, c) - if c == classes[r] { 1.0 } else { 0.0 }) * s } else { 0.0 };
                        gl.set(r, c, v);
                    }
                }
                vec![(*logits, gl)]
            }
        }
    }

    /// Gradient after [`Tape::backward`]; `None` when `v` does not reach the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter recorded through [`Tape::param`]. Unused
    /// parameters get zeros.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = self.grad(*v).cloned().unwrap_or_else(|| {
                    let (r, c) = self.value(*v).shape();
                    Tensor::zeros(r, c)
                });
                (name.clone(), g)
            })
            .collect()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
