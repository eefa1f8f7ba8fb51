//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node in
//! creation order, which is already a topological order. [`Graph::backward`]
//! walks the tape in reverse, accumulating gradients additively when a value
//! feeds several consumers. Parameters enter the tape through
//! [`Graph::param`] and their gradients come back as a [`GradMap`].

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Result, TensorError};
use crate::params::{GradMap, ParamId, ParamStore};
use crate::tensor::{gemm, split_axis, Operand, Tensor};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    index: u32,
}

impl Var {
    fn idx(self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Exponential moving averages kept by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize, momentum: f64) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum,
        }
    }

    pub fn update(&mut self, batch: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    /// Replaces the averages with statistics pooled over `batches`, each
    /// weighted equally: the mean of the batch means, and the mean of the
    /// batch variances plus the variance of the batch means. No-op when
    /// `batches` is empty.
    pub fn set_pooled(&mut self, batches: &[BatchStats]) {
        if batches.is_empty() {
            return;
        }
        let n = batches.len() as f64;
        for (c, (mean, var)) in self.mean.iter_mut().zip(self.var.iter_mut()).enumerate() {
            let mu = batches.iter().map(|b| b.mean[c]).sum::<f64>() / n;
            let within = batches.iter().map(|b| b.var[c]).sum::<f64>() / n;
            let between = batches.iter().map(|b| (b.mean[c] - mu).powi(2)).sum::<f64>() / n;
            *mean = mu;
            *var = within + between;
        }
    }
}

/// Per-column statistics of one training batch (variance unbiased).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Norm guard shared by the row normalization and cosine similarity.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    stopped: Vec<Tensor>,
    replay: Option<Vec<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            stopped: Vec::new(),
            replay: None,
        }
    }

    /// A graph whose `stop_gradient` calls return `values` in order instead
    /// of their inputs. Finite-difference checks use it to hold detached
    /// anchors at their base-point values.
    pub fn replaying(values: Vec<Tensor>) -> Self {
        Self {
            replay: Some(values),
            ..Self::new()
        }
    }

    /// Outputs of every `stop_gradient` call so far, in call order.
    pub fn stopped_values(&self) -> &[Tensor] {
        &self.stopped
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: (self.nodes.len() - 1) as u32,
        }
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.graph != self.id || v.idx() >= self.nodes.len() {
            return Err(TensorError::Graph(format!(
                "variable {}:{} does not belong to graph {}",
                v.graph, v.index, self.id
            )));
        }
        Ok(&self.nodes[v.idx()])
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx()].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.idx()].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx()].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.idx()).and_then(|g| g.as_deref())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Enters a stored parameter; frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        if p.trainable {
            self.push(p.value.clone(), Op::Param(id), true)
        } else {
            self.push(p.value.clone(), Op::Leaf, false)
        }
    }

    /// Identity on values; the result has no path back to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let mut value = self.check(x)?.value.clone();
        if let Some(replay) = &self.replay {
            let k = self.stopped.len();
            let recorded = replay.get(k).ok_or_else(|| {
                TensorError::Graph(format!("replay holds {} detached values, call {k} asked for one more", replay.len()))
            })?;
            if recorded.shape() != value.shape() {
                return Err(TensorError::Graph(format!(
                    "replayed detached value {k} has shape {:?}, expected {:?}",
                    recorded.shape(),
                    value.shape()
                )));
            }
            value = recorded.clone();
        }
        self.stopped.push(value.clone());
        Ok(self.push(value, Op::Leaf, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.value.matmul(&self.check(b)?.value)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.value.transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.check(a)?.value.shape(), self.check(b)?.value.shape());
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (&self.nodes[a.idx()].value, &self.nodes[b.idx()].value);
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = &self.nodes[x.idx()].value;
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.map(x, |v| scale * v + shift);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Affine(x, scale), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    fn row_operand(&self, op: &'static str, x: Var, row: Var) -> Result<(usize, usize)> {
        let (t, d) = self.check(x)?.value.dims2(op)?;
        let rs = self.check(row)?.value.shape();
        if rs != [d] {
            return Err(TensorError::Shape {
                op,
                lhs: vec![t, d],
                rhs: rs.to_vec(),
            });
        }
        Ok((t, d))
    }

    /// Adds a length-d row to every row of a t×d matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, d) = self.row_operand("add_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += r[i % d];
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// Multiplies every row of a t×d matrix elementwise by a length-d row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, d) = self.row_operand("mul_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= r[i % d];
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::MulRow(x, row), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.map(x, |v| v.max(0.0));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Relu(x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.map(x, sigmoid);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Sigmoid(x), rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.map(x, f64::exp);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Exp(x), rg))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = &self.check(x)?.value;
        if let Some((index, &value)) = t.data().iter().enumerate().find(|(_, v)| v.is_nan() || **v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                index,
                value,
            });
        }
        let out = self.map(x, f64::ln);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Log(x), rg))
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.map(x, |v| v.max(floor));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ClampMin(x, floor), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.check(x)?.value;
        if axis >= t.rank() {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                rank: t.rank(),
            });
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| src[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[at(a)] /= total;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Row-wise layer normalization of a t×d matrix with affine gamma/beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (t, d) = self.row_operand("layer_norm", x, gamma)?;
        self.row_operand("layer_norm", x, beta)?;
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; t * d];
        let mut inv_std = vec![0.0; t];
        let mut out = vec![0.0; t * d];
        for r in 0..t {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(vec![t, d], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Batch normalization over the rows of a t×d matrix using the batch's
    /// own statistics. Returns the statistics for a running-average update.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (t, d) = self.row_operand("batch_norm", x, gamma)?;
        self.row_operand("batch_norm", x, beta)?;
        if t < 2 {
            return Err(TensorError::DegenerateBatch { rows: t });
        }
        let src = self.value(x).data();
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for r in 0..t {
            for c in 0..d {
                mean[c] += src[r * d + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        for r in 0..t {
            for c in 0..d {
                var[c] += (src[r * d + c] - mean[c]).powi(2);
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / t as f64).collect();
        let unbiased: Vec<f64> = var.iter().map(|v| v / (t - 1) as f64).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let v = self.normalize_columns(x, gamma, beta, &mean, inv_std, true)?;
        Ok((
            v,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats,
        eps: f64,
    ) -> Result<Var> {
        let (t, d) = self.row_operand("batch_norm", x, gamma)?;
        self.row_operand("batch_norm", x, beta)?;
        if stats.mean.len() != d || stats.var.len() != d {
            return Err(TensorError::Shape {
                op: "batch_norm",
                lhs: vec![t, d],
                rhs: vec![stats.mean.len()],
            });
        }
        let inv_std = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize_columns(x, gamma, beta, &stats.mean.clone(), inv_std, false)
    }

    /// Batch normalization that updates `stats` in train mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BnMode,
        eps: f64,
    ) -> Result<Var> {
        match mode {
            BnMode::Train => {
                let (v, batch) = self.batch_norm_train(x, gamma, beta, eps)?;
                stats.update(&batch);
                Ok(v)
            }
            BnMode::Eval => self.batch_norm_eval(x, gamma, beta, stats, eps),
        }
    }

    fn normalize_columns(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch: bool,
    ) -> Result<Var> {
        let (t, d) = self.value(x).dims2("batch_norm")?;
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; t * d];
        let mut out = vec![0.0; t * d];
        for r in 0..t {
            for c in 0..d {
                let h = (src[r * d + c] - mean[c]) * inv_std[c];
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(vec![t, d], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Graph("concat of zero tensors".into()))?;
        let base = self.check(*first)?.value.shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.check(*v)?.value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.idx()].value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.check(x)?.value;
        if axis >= t.rank() {
            return Err(TensorError::Axis {
                op: "narrow",
                axis,
                rank: t.rank(),
            });
        }
        if start + len > t.shape()[axis] {
            return Err(TensorError::Shape {
                op: "narrow",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let (outer, full, inner) = split_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Narrow { x, axis, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.check(x)?.value.data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.check(x)?.value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Column means of a t×d matrix, as a length-d vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.check(x)?.value;
        let (rows, d) = t.dims2("mean_rows")?;
        let mut out = vec![0.0; d];
        for row in t.data().chunks_exact(d.max(1)).take(rows) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x), rg))
    }

    /// Scales each row to unit L2 norm. Rows with norm below [`NORM_EPS`]
    /// map to zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.check(x)?.value;
        let (rows, d) = t.dims2("normalize_rows")?;
        let norms: Vec<f64> = (0..rows)
            .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut out = t.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            if norms[r] > NORM_EPS {
                row.iter_mut().for_each(|v| *v /= norms[r]);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, rg))
    }

    /// Mean softmax cross-entropy over the rows whose target is `Some`.
    /// With no labelled row the result is an exact zero constant.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = &self.check(logits)?.value;
        let (rows, classes) = t.dims2("cross_entropy")?;
        if targets.len() != rows {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: vec![rows, classes],
                rhs: vec![targets.len()],
            });
        }
        for (index, label) in targets.iter().enumerate() {
            if let Some(label) = *label {
                if label >= classes {
                    return Err(TensorError::Label {
                        index,
                        label,
                        classes,
                    });
                }
            }
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Ok(self.constant(Tensor::scalar(0.0)));
        }
        let mut probs = vec![0.0; rows * classes];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
            if let Some(label) = targets[r] {
                loss += lse - row[label];
            }
        }
        let out = Tensor::scalar(loss / count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Leaf gradients stay readable through [`Graph::grad`]; parameter
    /// gradients are returned. A graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap> {
        let node = self.check(loss)?;
        if !node.value.is_scalar() {
            return Err(TensorError::Rank {
                op: "backward",
                expected: 0,
                actual: node.value.shape().to_vec(),
            });
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut params = GradMap::default();
        if self.nodes[loss.idx()].requires_grad {
            grads[loss.idx()] = Some(vec![1.0]);
        }
        for i in (0..=loss.idx()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            propagate(&self.nodes, node, &g, &mut grads, &mut params)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(params)
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn buf<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.idx()];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.idx()].get_or_insert_with(|| vec![0.0; n.value.numel()]))
}

fn acc_with(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    f: impl Fn(usize) -> f64,
) {
    if let Some(b) = buf(nodes, grads, v) {
        for (i, slot) in b.iter_mut().enumerate() {
            *slot += f(i);
        }
    }
}

fn propagate(
    nodes: &[Node],
    node: &Node,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    params: &mut GradMap,
) -> Result<()> {
    let val = |v: Var| nodes[v.idx()].value.data();
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Param(id) => params.accumulate(*id, g),
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a.idx()].value.dims2("matmul")?;
            let n = nodes[b.idx()].value.shape()[1];
            if let Some(da) = buf(nodes, grads, *a) {
                gemm(m, n, k, Operand::plain(g, n), Operand::transposed(val(*b), n), da, 1.0);
            }
            if let Some(db) = buf(nodes, grads, *b) {
                gemm(k, m, n, Operand::transposed(val(*a), k), Operand::plain(g, n), db, 1.0);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = nodes[x.idx()].value.dims2("transpose")?;
            acc_with(nodes, grads, *x, |i| g[(i % c) * r + i / c]);
        }
        Op::Add(a, b) => {
            acc_with(nodes, grads, *a, |i| g[i]);
            acc_with(nodes, grads, *b, |i| g[i]);
        }
        Op::Sub(a, b) => {
            acc_with(nodes, grads, *a, |i| g[i]);
            acc_with(nodes, grads, *b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc_with(nodes, grads, *a, |i| g[i] * vb[i]);
            acc_with(nodes, grads, *b, |i| g[i] * va[i]);
        }
        Op::Affine(x, s) => acc_with(nodes, grads, *x, |i| s * g[i]),
        Op::AddRow(x, row) => {
            acc_with(nodes, grads, *x, |i| g[i]);
            let d = val(*row).len();
            if let Some(b) = buf(nodes, grads, *row) {
                for (i, gv) in g.iter().enumerate() {
                    b[i % d] += gv;
                }
            }
        }
        Op::MulRow(x, row) => {
            let (vx, vr) = (val(*x), val(*row));
            let d = vr.len();
            acc_with(nodes, grads, *x, |i| g[i] * vr[i % d]);
            if let Some(b) = buf(nodes, grads, *row) {
                for (i, gv) in g.iter().enumerate() {
                    b[i % d] += gv * vx[i];
                }
            }
        }
        Op::Relu(x) => {
            let vx = val(*x);
            acc_with(nodes, grads, *x, |i| if vx[i] > 0.0 { g[i] } else { 0.0 });
        }
        Op::Sigmoid(x) => acc_with(nodes, grads, *x, |i| g[i] * y[i] * (1.0 - y[i])),
        Op::Exp(x) => acc_with(nodes, grads, *x, |i| g[i] * y[i]),
        Op::Log(x) => {
            let vx = val(*x);
            acc_with(nodes, grads, *x, |i| g[i] / vx[i]);
        }
        Op::ClampMin(x, floor) => {
            let vx = val(*x);
            acc_with(nodes, grads, *x, |i| if vx[i] > *floor { g[i] } else { 0.0 });
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(node.value.shape(), *axis);
            if let Some(b) = buf(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            b[at(a)] += y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (t, d) = node.value.dims2("layer_norm")?;
            let gm = val(*gamma);
            if let Some(b) = buf(nodes, grads, *gamma) {
                for i in 0..t * d {
                    b[i % d] += g[i] * xhat[i];
                }
            }
            if let Some(b) = buf(nodes, grads, *beta) {
                for i in 0..t * d {
                    b[i % d] += g[i];
                }
            }
            if let Some(b) = buf(nodes, grads, *x) {
                for r in 0..t {
                    let row = r * d..(r + 1) * d;
                    let dh: Vec<f64> = row.clone().map(|i| g[i] * gm[i % d]).collect();
                    let sum_dh: f64 = dh.iter().sum();
                    let sum_dh_h: f64 = dh.iter().zip(&xhat[row.clone()]).map(|(a, h)| a * h).sum();
                    for c in 0..d {
                        let h = xhat[r * d + c];
                        b[r * d + c] +=
                            inv_std[r] / d as f64 * (d as f64 * dh[c] - sum_dh - h * sum_dh_h);
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch,
        } => {
            let (t, d) = node.value.dims2("batch_norm")?;
            let gm = val(*gamma);
            if let Some(b) = buf(nodes, grads, *gamma) {
                for i in 0..t * d {
                    b[i % d] += g[i] * xhat[i];
                }
            }
            if let Some(b) = buf(nodes, grads, *beta) {
                for i in 0..t * d {
                    b[i % d] += g[i];
                }
            }
            if let Some(b) = buf(nodes, grads, *x) {
                if *batch {
                    let mut sum_dh = vec![0.0; d];
                    let mut sum_dh_h = vec![0.0; d];
                    for i in 0..t * d {
                        let dh = g[i] * gm[i % d];
                        sum_dh[i % d] += dh;
                        sum_dh_h[i % d] += dh * xhat[i];
                    }
                    let tf = t as f64;
                    for i in 0..t * d {
                        let c = i % d;
                        let dh = g[i] * gm[c];
                        b[i] += inv_std[c] / tf * (tf * dh - sum_dh[c] - xhat[i] * sum_dh_h[c]);
                    }
                } else {
                    for i in 0..t * d {
                        b[i] += g[i] * gm[i % d] * inv_std[i % d];
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            let out_chunk = node.value.shape()[*axis] * inner;
            for v in inputs {
                let len = nodes[v.idx()].value.shape()[*axis] * inner;
                if let Some(b) = buf(nodes, grads, *v) {
                    for o in 0..outer {
                        let src = &g[o * out_chunk + offset..o * out_chunk + offset + len];
                        b[o * len..(o + 1) * len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let (outer, full, inner) = split_axis(nodes[x.idx()].value.shape(), *axis);
            let len = node.value.shape()[*axis];
            if let Some(b) = buf(nodes, grads, *x) {
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    b[base..base + len * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Sum(x) => acc_with(nodes, grads, *x, |_| g[0]),
        Op::Mean(x) => {
            let n = nodes[x.idx()].value.numel() as f64;
            acc_with(nodes, grads, *x, |_| g[0] / n);
        }
        Op::MeanRows(x) => {
            let (rows, d) = nodes[x.idx()].value.dims2("mean_rows")?;
            acc_with(nodes, grads, *x, |i| g[i % d] / rows as f64);
        }
        Op::NormalizeRows { x, norms } => {
            let d = node.value.shape()[1];
            if let Some(b) = buf(nodes, grads, *x) {
                for (r, &norm) in norms.iter().enumerate() {
                    if norm <= NORM_EPS {
                        continue;
                    }
                    let row = r * d..(r + 1) * d;
                    let dot: f64 = row.clone().map(|i| y[i] * g[i]).sum();
                    for i in row {
                        b[i] += (g[i] - y[i] * dot) / norm;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            let classes = nodes[logits.idx()].value.shape()[1];
            let scale = g[0] / *count as f64;
            if let Some(b) = buf(nodes, grads, *logits) {
                for (r, target) in targets.iter().enumerate() {
                    let Some(label) = target else { continue };
                    for c in 0..classes {
                        let onehot = if c == *label { 1.0 } else { 0.0 };
                        b[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                    }
                }
            }
        }
    }
    Ok(())
}
