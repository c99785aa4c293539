//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] borrows the model's [`ParamStore`] read-only. Every op appends
//! a node holding its output and whatever it needs for the backward pass.
//! [`Graph::backward`] consumes the tape and returns per-parameter gradients,
//! which the caller folds into the store with [`ParamStore::accumulate`].
//!
//! All node values are 2-D (`rows x cols`) except scalars, which are `[1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{mix_seed, BufferUpdate, Gradients, ParamId, ParamStore};
use super::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;

/// Deterministic inverted dropout: the mask for the n-th dropout call of a
/// step is a pure function of `(seed, step, n)`.
#[derive(Clone, Copy, Debug)]
pub struct DropoutCtx {
    pub rate: f64,
    pub seed: u64,
    pub step: u64,
}

/// Output geometry of a 2-D convolution over `channels x height x width`
/// inputs stored flat in each row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfolds one sample into a `[patch_len, out_h * out_w]` column matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let npos = oh * ow;
        let k = self.kernel;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            let v = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.height
                                && (ix as usize) < self.width
                            {
                                x[(c * self.height + iy as usize) * self.width + ix as usize]
                            } else {
                                0.0
                            };
                            cols[row * npos + oy * ow + ox] = v;
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let npos = oh * ow;
        let k = self.kernel;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.height {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix as usize >= self.width {
                                continue;
                            }
                            dx[(c * self.height + iy as usize) * self.width + ix as usize] +=
                                cols[row * npos + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
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
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Dropout(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    MarginLoss {
        scores: Var,
        pos: Vec<Vec<usize>>,
        neg: Vec<Vec<usize>>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
}

#[derive(Debug)]
enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Row-major `c = beta * c + op(a) * op(b)` with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // op(a) is m x k; stored a is (m x k) or (k x m).
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices are sized by the callers to cover the strided extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, g: &[f64]) {
    match acc {
        Some(a) => {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
        None => *acc = Some(g.to_vec()),
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    precision: Precision,
    dropout: Option<DropoutCtx>,
    dropout_calls: u64,
    buffer_updates: Vec<BufferUpdate>,
    corrupt_backward: bool,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            precision: params.precision(),
            dropout: None,
            dropout_calls: 0,
            buffer_updates: Vec::new(),
            corrupt_backward: false,
        }
    }

    pub fn with_dropout(mut self, ctx: Option<DropoutCtx>) -> Self {
        self.dropout = ctx.filter(|c| c.rate > 0.0);
        self
    }

    pub fn training(&self) -> bool {
        self.dropout.is_some()
    }

    /// Negative-control switch: perturbs the matmul backward so gradient
    /// checks must fail.
    pub fn set_corrupt_backward(&mut self, on: bool) {
        self.corrupt_backward = on;
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].shape[0]
    }

    pub fn cols(&self, v: Var) -> usize {
        self.dims2(v).1
    }

    pub fn data(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.params.value(*id).data(),
        }
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.data(v).to_vec())
            .expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.data(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, mut data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.precision.round_slice(&mut data);
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            1 => (1, s[0]),
            _ => (s[0], s[1..].iter().product()),
        }
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        let shape = if shape.len() == 1 { vec![1, shape[0]] } else { shape };
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::shape("matrix", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(vec![rows, cols], data, Op::Leaf, false))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.params.get(id);
        let shape = p.value.shape().to_vec();
        let shape = if shape.len() == 1 { vec![1, shape[0]] } else { shape };
        self.nodes.push(Node {
            shape,
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: p.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims2(a);
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(vec![n, m], out, Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims2(a) != self.dims2(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// `x + b` with the row vector `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        let (br, bn) = self.dims2(b);
        if br != 1 || bn != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(b)));
        }
        let bd = self.data(b);
        let mut out = self.data(x).to_vec();
        for r in 0..m {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(bd) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(vec![m, n], out, Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        let src = self.data(x);
        if src.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut out = src.to_vec();
        for r in 0..m {
            softmax_in_place(&mut out[r * n..(r + 1) * n]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![m, n], out, Op::SoftmaxRows(x), rg))
    }

    /// `x W (+ b)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.dims2(gain) != (1, n) || self.dims2(bias) != (1, n) {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.data(x);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for (h, v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[r * n + c] = xhat[r * n + c] * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Batch normalization over rows.
    ///
    /// With `train` and at least two rows, normalizes with batch statistics and
    /// queues running-statistic updates (see [`Graph::take_buffer_updates`]).
    /// Otherwise normalizes with the running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f64,
        train: bool,
    ) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.dims2(gain) != (1, n) || self.dims2(bias) != (1, n) {
            return Err(Error::shape("batch_norm", self.shape(x), self.shape(gain)));
        }
        let use_batch = train && m >= 2;
        if train && m < 2 {
            log::warn!("batch_norm: single-row batch in train mode, using running statistics");
        }
        let src = self.data(x);
        let (mean, var): (Vec<f64>, Vec<f64>) = if use_batch {
            let mut mean = vec![0.0; n];
            for r in 0..m {
                for c in 0..n {
                    mean[c] += src[r * n + c];
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            let mut var = vec![0.0; n];
            for r in 0..m {
                for c in 0..n {
                    var[c] += (src[r * n + c] - mean[c]).powi(2);
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            (mean, var)
        } else {
            (
                self.params.value(running_mean).data().to_vec(),
                self.params.value(running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                xhat[r * n + c] = (src[r * n + c] - mean[c]) * inv_std[c];
            }
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[r * n + c] = xhat[r * n + c] * g[c] + b[c];
            }
        }
        if use_batch {
            let unbiased = m as f64 / (m as f64 - 1.0);
            self.buffer_updates.push(BufferUpdate {
                target: running_mean,
                batch_value: mean,
                momentum,
            });
            self.buffer_updates.push(BufferUpdate {
                target: running_var,
                batch_value: var.iter().map(|v| v * unbiased).collect(),
                momentum,
            });
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            vec![m, n],
            out,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats: use_batch,
            },
            rg,
        ))
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Contract(format!("row index {bad} out of range for {m} rows")));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![idx.len(), n], out, Op::GatherRows(x, idx.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2(parts[0]).0;
        for &p in parts {
            if self.dims2(p).0 != m {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims2(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for r in 0..m {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if start + width > n {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, width]));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(m * width);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + width]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![m, width], out, Op::SliceCols(x, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(parts[0]).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p);
            if pn != n {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            out.extend_from_slice(self.data(p));
            m += pm;
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![m, n], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.data(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Inverted dropout; identity when the graph has no dropout context.
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some(ctx) = self.dropout else { return x };
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[ctx.seed, ctx.step, call]));
        let keep = 1.0 - ctx.rate;
        let mask: Vec<f64> = (0..self.data(x).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Dropout(x, mask), rg)
    }

    /// Mean cross-entropy of row-wise softmax(logits) against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(logits);
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Contract(format!("target class {t} >= {n}")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for r in 0..m {
            let row = &mut probs[r * n..(r + 1) * n];
            softmax_in_place(row);
            loss -= row[targets[r]].max(1e-300).ln();
        }
        let loss = if m > 0 { loss / m as f64 } else { 0.0 };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Sum over rows of `sum_{p in pos} sum_{q in neg} max(0, 1 - s_p + s_q)`.
    pub fn multilabel_margin(
        &mut self,
        scores: Var,
        pos: &[Vec<usize>],
        neg: &[Vec<usize>],
    ) -> Result<Var> {
        let (m, n) = self.dims2(scores);
        if pos.len() != m || neg.len() != m {
            return Err(Error::shape("multilabel_margin", self.shape(scores), &[pos.len()]));
        }
        let s = self.data(scores);
        let mut loss = 0.0;
        for r in 0..m {
            let row = &s[r * n..(r + 1) * n];
            for &p in &pos[r] {
                for &q in &neg[r] {
                    if p >= n || q >= n {
                        return Err(Error::Contract(format!("predicate index out of range {p}/{q}")));
                    }
                    loss += (1.0 - row[p] + row[q]).max(0.0);
                }
            }
        }
        let rg = self.rg(&[scores]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::MarginLoss {
                scores,
                pos: pos.to_vec(),
                neg: neg.to_vec(),
            },
            rg,
        ))
    }

    /// 2-D convolution; each row of `x` is one `in_channels x height x width`
    /// sample, `w` is `[out_channels, in_channels * k * k]`, `b` is
    /// `[out_channels]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if n != geom.in_len() {
            return Err(Error::shape("conv2d", self.shape(x), &[geom.in_len()]));
        }
        if self.dims2(w) != (geom.out_channels, geom.patch_len()) {
            return Err(Error::shape(
                "conv2d",
                self.shape(w),
                &[geom.out_channels, geom.patch_len()],
            ));
        }
        if self.dims2(b) != (1, geom.out_channels) {
            return Err(Error::shape("conv2d", self.shape(b), &[geom.out_channels]));
        }
        let npos = geom.out_height() * geom.out_width();
        let out_len = geom.out_len();
        let mut out = vec![0.0; m * out_len];
        let mut cols = vec![0.0; geom.patch_len() * npos];
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        for r in 0..m {
            geom.im2col(&xd[r * n..(r + 1) * n], &mut cols);
            let o = &mut out[r * out_len..(r + 1) * out_len];
            for (c, chunk) in o.chunks_mut(npos).enumerate() {
                chunk.fill(bd[c]);
            }
            gemm(geom.out_channels, geom.patch_len(), npos, wd, false, &cols, false, o, 1.0);
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(vec![m, out_len], out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.data(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients {
            per_param: vec![None; self.params.len()],
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let shape = self.params.value(*id).shape().to_vec();
                match &mut out.per_param[id.0] {
                    Some(t) => t.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(Tensor::new(shape, g.to_vec())?),
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                let fault = if self.corrupt_backward { 1.5 } else { 1.0 };
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.data(*b), true, &mut da, 0.0);
                    if fault != 1.0 {
                        da.iter_mut().for_each(|v| *v *= fault);
                    }
                    add_into(&mut grads[a.0], &da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.data(*a), true, g, false, &mut db, 0.0);
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims2(*a);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                add_into(&mut grads[a.0], &da);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if needs(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if needs(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d: Vec<f64> = g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if needs(*b) {
                    let d: Vec<f64> = g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::AddRow(x, b) => {
                if needs(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if needs(*b) {
                    let n = self.dims2(*b).1;
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Scale(x, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Relu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Sigmoid(x) => {
                let y = node_data(node, self);
                let d: Vec<f64> = g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::SoftmaxRows(x) => {
                let y = node_data(node, self);
                let n = node.shape[1];
                let mut d = vec![0.0; y.len()];
                for r in 0..y.len() / n.max(1) {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        d[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                add_into(&mut grads[x.0], &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.shape[1];
                let m = node.shape[0];
                let gd = self.data(*gain);
                if needs(*gain) || needs(*bias) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += g[r * n + c] * xhat[r * n + c];
                            db[c] += g[r * n + c];
                        }
                    }
                    if needs(*gain) {
                        add_into(&mut grads[gain.0], &dg);
                    }
                    if needs(*bias) {
                        add_into(&mut grads[bias.0], &db);
                    }
                }
                if needs(*x) {
                    let mut dx = vec![0.0; m * n];
                    let nf = n as f64;
                    for r in 0..m {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            let dh = g[r * n + c] * gd[c];
                            s1 += dh;
                            s2 += dh * xhat[r * n + c];
                        }
                        for c in 0..n {
                            let dh = g[r * n + c] * gd[c];
                            dx[r * n + c] =
                                inv_std[r] / nf * (nf * dh - s1 - xhat[r * n + c] * s2);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let n = node.shape[1];
                let m = node.shape[0];
                let gd = self.data(*gain);
                if needs(*gain) || needs(*bias) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += g[r * n + c] * xhat[r * n + c];
                            db[c] += g[r * n + c];
                        }
                    }
                    if needs(*gain) {
                        add_into(&mut grads[gain.0], &dg);
                    }
                    if needs(*bias) {
                        add_into(&mut grads[bias.0], &db);
                    }
                }
                if needs(*x) {
                    let mut dx = vec![0.0; m * n];
                    if *batch_stats {
                        let mf = m as f64;
                        for c in 0..n {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for r in 0..m {
                                let dh = g[r * n + c] * gd[c];
                                s1 += dh;
                                s2 += dh * xhat[r * n + c];
                            }
                            for r in 0..m {
                                let dh = g[r * n + c] * gd[c];
                                dx[r * n + c] =
                                    inv_std[c] / mf * (mf * dh - s1 - xhat[r * n + c] * s2);
                            }
                        }
                    } else {
                        for r in 0..m {
                            for c in 0..n {
                                dx[r * n + c] = g[r * n + c] * gd[c] * inv_std[c];
                            }
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::GatherRows(x, idx) => {
                let (m, n) = self.dims2(*x);
                let mut dx = vec![0.0; m * n];
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..n {
                        dx[i * n + c] += g[k * n + c];
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::ConcatCols(parts) => {
                let m = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for p in parts {
                    let w = self.dims2(*p).1;
                    if needs(*p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        add_into(&mut grads[p.0], &d);
                    }
                    off += w;
                }
            }
            Op::SliceCols(x, start) => {
                let (m, n) = self.dims2(*x);
                let w = node.shape[1];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.data(*p).len();
                    if needs(*p) {
                        add_into(&mut grads[p.0], &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.data(*x).len()];
                add_into(&mut grads[x.0], &d);
            }
            Op::Dropout(x, mask) => {
                let d: Vec<f64> = g.iter().zip(mask).map(|(a, b)| a * b).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let m = targets.len();
                if m > 0 {
                    let n = probs.len() / m;
                    let scale = g[0] / m as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        d[r * n + t] -= scale;
                    }
                    add_into(&mut grads[logits.0], &d);
                }
            }
            Op::MarginLoss { scores, pos, neg } => {
                let n = self.dims2(*scores).1;
                let s = self.data(*scores);
                let mut d = vec![0.0; s.len()];
                for r in 0..pos.len() {
                    for &p in &pos[r] {
                        for &q in &neg[r] {
                            if 1.0 - s[r * n + p] + s[r * n + q] > 0.0 {
                                d[r * n + p] -= g[0];
                                d[r * n + q] += g[0];
                            }
                        }
                    }
                }
                add_into(&mut grads[scores.0], &d);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (m, n) = self.dims2(*x);
                let npos = geom.out_height() * geom.out_width();
                let out_len = geom.out_len();
                let pl = geom.patch_len();
                let xd = self.data(*x);
                let wd = self.data(*w);
                let mut cols = vec![0.0; pl * npos];
                let mut dw = vec![0.0; geom.out_channels * pl];
                let mut db = vec![0.0; geom.out_channels];
                let mut dx = if needs(*x) { vec![0.0; m * n] } else { Vec::new() };
                let mut dcols = vec![0.0; pl * npos];
                for r in 0..m {
                    let gr = &g[r * out_len..(r + 1) * out_len];
                    if needs(*w) {
                        geom.im2col(&xd[r * n..(r + 1) * n], &mut cols);
                        gemm(geom.out_channels, npos, pl, gr, false, &cols, true, &mut dw, 1.0);
                    }
                    for (c, chunk) in gr.chunks(npos).enumerate() {
                        db[c] += chunk.iter().sum::<f64>();
                    }
                    if needs(*x) {
                        gemm(pl, geom.out_channels, npos, wd, true, gr, false, &mut dcols, 0.0);
                        geom.col2im(&dcols, &mut dx[r * n..(r + 1) * n]);
                    }
                }
                if needs(*w) {
                    add_into(&mut grads[w.0], &dw);
                }
                if needs(*b) {
                    add_into(&mut grads[b.0], &db);
                }
                if needs(*x) {
                    add_into(&mut grads[x.0], &dx);
                }
            }
        }
        Ok(())
    }
}

fn node_data<'a>(node: &'a Node, g: &'a Graph<'_>) -> &'a [f64] {
    match &node.value {
        Value::Owned(d) => d,
        Value::Param(id) => g.params.value(*id).data(),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
