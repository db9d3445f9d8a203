//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! execution order. Nodes are immutable once pushed, so the backward pass is
//! a single reverse sweep over the tape. Most operations work on 2-D
//! `[rows, cols]` tensors; sequences are laid out as `[time, channels]`.

use std::collections::HashMap;

use super::kernels;
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulConst(Var, Vec<f64>),
    AddConst(Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize },
    ConvTranspose1d { x: Var, w: Var, b: Option<Var>, stride: usize },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    Mse(Var, Var),
    StraightThrough(Var),
    Diversity(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation tape for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    dropout: Option<(f64, super::Rng)>,
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => Err(Error::shape(op, format!("expected a 2-D operand, got {s:?}"))),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn t2(r: usize, c: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![r, c], data).expect("kernel output matches shape")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Turns [`Graph::dropout`] on with drop probability `p` for this tape.
    pub fn enable_dropout(&mut self, p: f64, seed: u64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        self.dropout = (p > 0.0).then(|| (p, super::seeded(seed)));
        Ok(())
    }

    /// Inverted dropout when enabled, identity otherwise.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let p = *p;
        let keep = 1.0 / (1.0 - p);
        let v = self.nodes[x.0].value.shape().to_vec();
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<f64> = (0..n).map(|_| if rand::Rng::random::<f64>(rng) < p { 0.0 } else { keep }).collect();
        self.mul_const(x, &Tensor::new(v, mask)?)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor; it is differentiable iff `requires_grad` is set.
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    /// Records a parameter leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let out = kernels::mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t2(m, n, out), Op::MatMul(a, b), needs))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul_nt", self.value(a))?;
        let (n, k2) = dims2("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m}, {k}] x [{n}, {k2}]ᵀ")));
        }
        let out = kernels::mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t2(m, n, out), Op::MatMulNT(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.value(a))?;
        let out = kernels::transpose(self.value(a).data(), r, c);
        let needs = self.needs(a);
        Ok(self.push(t2(c, r, out), Op::Transpose(a), needs))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op, self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.value(a).shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = dims2("add_row", self.value(x))?;
        if self.value(bias).numel() != c {
            return Err(Error::shape(
                "add_row",
                format!("[{r}, {c}] + bias {:?}", self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(t2(r, c, out), Op::AddRow(x, bias), needs))
    }

    /// Element-wise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        same_shape("mul_const", self.value(x), c)?;
        let data: Vec<f64> = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let t = Tensor::new(c.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::MulConst(x, c.data().to_vec()), needs))
    }

    /// Element-wise sum with a constant tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        same_shape("add_const", self.value(x), c)?;
        let data: Vec<f64> = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let t = Tensor::new(c.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::AddConst(x), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * factor).collect())
            .expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Scale(x, factor), needs)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
            .expect("same shape");
        let needs = self.needs(x);
        self.push(t, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("softmax", self.value(x))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            kernels::softmax_inplace(row);
        }
        let needs = self.needs(x);
        Ok(self.push(t2(r, c, out), Op::Softmax(x), needs))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("log_softmax", self.value(x))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            kernels::log_softmax_inplace(row);
        }
        let needs = self.needs(x);
        Ok(self.push(t2(r, c, out), Op::LogSoftmax(x), needs))
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = dims2("layer_norm", self.value(x))?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "width {c} vs gamma {:?} / beta {:?}",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        for (row, orow) in xhat.chunks_mut(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for ((v, o), (gv, bv)) in row.iter_mut().zip(orow.iter_mut()).zip(g.iter().zip(b)) {
                *v = (*v - mean) * is;
                *o = *v * gv + bv;
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(t2(r, c, out), Op::LayerNorm { x, gamma, beta, xhat, inv_std }, needs))
    }

    /// 1-D convolution over `[time, in_channels]` with weight
    /// `[out_channels, in_channels / groups, kernel]`. Output length is
    /// `(time + 2·padding − kernel) / stride + 1`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let (t, cin) = dims2("conv1d", self.value(x))?;
        let ws = self.value(w).shape().to_vec();
        let [cout, cpg, k] = ws[..] else {
            return Err(Error::shape("conv1d", format!("weight must be 3-D, got {ws:?}")));
        };
        if stride == 0 || groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cpg {
            return Err(Error::shape(
                "conv1d",
                format!("input [{t}, {cin}], weight {ws:?}, stride {stride}, groups {groups}"),
            ));
        }
        if t + 2 * padding < k {
            return Err(Error::shape("conv1d", format!("length {t} with padding {padding} shorter than kernel {k}")));
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(Error::shape("conv1d", format!("bias {:?} for {cout} outputs", self.value(b).shape())));
            }
        }
        let tout = (t + 2 * padding - k) / stride + 1;
        let geom = kernels::ConvGeom { t, cin, cout, k, stride, padding, groups };
        let mut out = kernels::conv1d(self.value(x).data(), self.value(w).data(), &geom);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(cout) {
                for (o, bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(t2(tout, cout, out), Op::Conv1d { x, w, b, stride, padding, groups }, needs))
    }

    /// Transposed 1-D convolution with weight `[in_channels, out_channels, kernel]`.
    /// Output length is `(time − 1)·stride + kernel` (no cropping).
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (t, cin) = dims2("conv_transpose1d", self.value(x))?;
        let ws = self.value(w).shape().to_vec();
        let [cin2, cout, k] = ws[..] else {
            return Err(Error::shape("conv_transpose1d", format!("weight must be 3-D, got {ws:?}")));
        };
        if cin != cin2 || stride == 0 || t == 0 {
            return Err(Error::shape("conv_transpose1d", format!("input [{t}, {cin}], weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(Error::shape("conv_transpose1d", format!("bias {:?} for {cout} outputs", self.value(b).shape())));
            }
        }
        let tout = (t - 1) * stride + k;
        let mut out = kernels::conv_transpose1d(self.value(x).data(), self.value(w).data(), t, cin, cout, k, stride);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(cout) {
                for (o, bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(t2(tout, cout, out), Op::ConvTranspose1d { x, w, b, stride }, needs))
    }

    /// Gathers rows of `table` (`[vocab, dim]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = dims2("embedding", self.value(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape("embedding", format!("id {bad} outside vocabulary of {vocab}")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(t2(ids.len(), d, out), Op::Embedding { table, ids: ids.to_vec() }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no operands"))?;
        let r = dims2("concat", self.value(*first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2("concat", self.value(p))?;
            if pr != r {
                return Err(Error::shape("concat", format!("row counts {r} vs {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t2(r, total, out), Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no operands"))?;
        let c = dims2("concat", self.value(*first))?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = dims2("concat", self.value(p))?;
            if pc != c {
                return Err(Error::shape("concat", format!("column counts {c} vs {pc}")));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t2(rows, c, out), Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2("slice", self.value(x))?;
        if start + len > r {
            return Err(Error::shape("slice", format!("rows [{start}, {}) of {r}", start + len)));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let needs = self.needs(x);
        Ok(self.push(t2(len, c, out), Op::SliceRows { x, start }, needs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2("slice", self.value(x))?;
        if start + len > c {
            return Err(Error::shape("slice", format!("cols [{start}, {}) of {c}", start + len)));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(t2(r, len, out), Op::SliceCols { x, start }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Column means: `[rows, cols] → [1, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("mean_rows", self.value(x))?;
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let needs = self.needs(x);
        Ok(self.push(t2(1, c, out), Op::MeanRows(x), needs))
    }

    /// Mean cross-entropy of row-wise logits against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = dims2("cross_entropy", self.value(logits))?;
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", format!("{r} rows vs {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("cross_entropy", format!("target {bad} outside {c} classes")));
        }
        let mut logp = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in logp.chunks_mut(c).zip(targets) {
            kernels::log_softmax_inplace(row);
            loss -= row[t];
        }
        let probs = logp.iter().map(|v| v.exp()).collect();
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss / r.max(1) as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            needs,
        ))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(Error::shape("bce_with_logits", format!("{} logits vs {} targets", z.len(), targets.len())));
        }
        let loss: f64 = z.iter().zip(targets).map(|(&z, &y)| kernels::bce_logit(z, y)).sum();
        let n = z.len().max(1) as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss / n),
            Op::BceWithLogits { logits, targets: targets.to_vec() },
            needs,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse", self.value(a), self.value(b))?;
        let n = self.value(a).numel().max(1) as f64;
        let s: f64 = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), needs))
    }

    /// Forward value is `hard`; the gradient passes unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        same_shape("straight_through", self.value(soft), &hard)?;
        let needs = self.needs(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), needs))
    }

    /// Codebook diversity penalty `(V − exp(H(p)))/V` of a probability vector.
    pub fn diversity(&mut self, p: Var) -> Var {
        let v = kernels::diversity(self.value(p).data());
        let needs = self.needs(p);
        self.push(Tensor::scalar(v), Op::Diversity(p), needs)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<GradTape> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        Ok(GradTape { grads, params: self.params.clone() })
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2("matmul", val(*a)).unwrap();
                let n = val(*b).cols();
                acc(*a, &mut |g| kernels::add_into(g, &kernels::mm_nt(gy, val(*b).data(), m, n, k)));
                acc(*b, &mut |g| kernels::add_into(g, &kernels::mm_tn(val(*a).data(), gy, m, k, n)));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = dims2("matmul_nt", val(*a)).unwrap();
                let n = val(*b).rows();
                acc(*a, &mut |g| kernels::add_into(g, &kernels::mm(gy, val(*b).data(), m, n, k)));
                acc(*b, &mut |g| kernels::add_into(g, &kernels::mm_tn(gy, val(*a).data(), m, n, k)));
            }
            Op::Transpose(a) => {
                let (r, c) = dims2("transpose", val(*a)).unwrap();
                acc(*a, &mut |g| kernels::add_into(g, &kernels::transpose(gy, c, r)));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| kernels::add_into(g, gy));
                acc(*b, &mut |g| kernels::add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| kernels::add_into(g, gy));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |g| g.iter_mut().zip(gy).zip(bd).for_each(|((x, y), bv)| *x += y * bv));
                acc(*b, &mut |g| g.iter_mut().zip(gy).zip(ad).for_each(|((x, y), av)| *x += y * av));
            }
            Op::AddRow(x, bias) => {
                let c = val(*x).cols();
                acc(*x, &mut |g| kernels::add_into(g, gy));
                acc(*bias, &mut |g| {
                    for row in gy.chunks(c) {
                        kernels::add_into(g, row);
                    }
                });
            }
            Op::MulConst(x, c) => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).zip(c).for_each(|((x, y), cv)| *x += y * cv));
            }
            Op::AddConst(x) => acc(*x, &mut |g| kernels::add_into(g, gy)),
            Op::Scale(x, f) => acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(x, y)| *x += y * f)),
            Op::Relu(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |g| {
                    g.iter_mut().zip(gy).zip(xd).for_each(|((g, y), &xv)| {
                        if xv > 0.0 {
                            *g += y
                        }
                    })
                });
            }
            Op::Gelu(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |g| g.iter_mut().zip(gy).zip(xd).for_each(|((g, y), &xv)| *g += y * kernels::gelu_grad(xv)));
            }
            Op::Sigmoid(x) => {
                let yd = node.value.data();
                acc(*x, &mut |g| g.iter_mut().zip(gy).zip(yd).for_each(|((g, dy), s)| *g += dy * s * (1.0 - s)));
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                let yd = node.value.data();
                acc(*x, &mut |g| {
                    for ((grow, dyrow), yrow) in g.chunks_mut(c).zip(gy.chunks(c)).zip(yd.chunks(c)) {
                        let dot: f64 = dyrow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((gv, dy), y) in grow.iter_mut().zip(dyrow).zip(yrow) {
                            *gv += y * (dy - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = node.value.cols();
                let yd = node.value.data();
                acc(*x, &mut |g| {
                    for ((grow, dyrow), yrow) in g.chunks_mut(c).zip(gy.chunks(c)).zip(yd.chunks(c)) {
                        let s: f64 = dyrow.iter().sum();
                        for ((gv, dy), y) in grow.iter_mut().zip(dyrow).zip(yrow) {
                            *gv += dy - y.exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = node.value.cols();
                let gd = val(*gamma).data();
                acc(*gamma, &mut |g| {
                    for (dyrow, xrow) in gy.chunks(c).zip(xhat.chunks(c)) {
                        g.iter_mut().zip(dyrow).zip(xrow).for_each(|((g, dy), xh)| *g += dy * xh);
                    }
                });
                acc(*beta, &mut |g| {
                    for dyrow in gy.chunks(c) {
                        kernels::add_into(g, dyrow);
                    }
                });
                acc(*x, &mut |g| {
                    for (((grow, dyrow), xrow), is) in
                        g.chunks_mut(c).zip(gy.chunks(c)).zip(xhat.chunks(c)).zip(inv_std)
                    {
                        let dxh: Vec<f64> = dyrow.iter().zip(gd).map(|(d, gm)| d * gm).collect();
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dxh.iter().zip(xrow).map(|(d, xh)| d * xh).sum::<f64>() / c as f64;
                        for ((gv, d), xh) in grow.iter_mut().zip(&dxh).zip(xrow) {
                            *gv += is * (d - m1 - xh * m2);
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, stride, padding, groups } => {
                let (t, cin) = dims2("conv1d", val(*x)).unwrap();
                let ws = val(*w).shape();
                let geom = kernels::ConvGeom {
                    t,
                    cin,
                    cout: ws[0],
                    k: ws[2],
                    stride: *stride,
                    padding: *padding,
                    groups: *groups,
                };
                acc(*x, &mut |g| kernels::conv1d_grad_input(gy, val(*w).data(), &geom, g));
                acc(*w, &mut |g| kernels::conv1d_grad_weight(gy, val(*x).data(), &geom, g));
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for row in gy.chunks(geom.cout) {
                            kernels::add_into(g, row);
                        }
                    });
                }
            }
            Op::ConvTranspose1d { x, w, b, stride } => {
                let (t, cin) = dims2("conv_transpose1d", val(*x)).unwrap();
                let ws = val(*w).shape();
                let (cout, k) = (ws[1], ws[2]);
                let (xd, wd) = (val(*x).data(), val(*w).data());
                acc(*x, &mut |g| {
                    for ti in 0..t {
                        for c in 0..cin {
                            let mut s = 0.0;
                            for kk in 0..k {
                                let orow = &gy[(ti * stride + kk) * cout..(ti * stride + kk + 1) * cout];
                                for (o, dy) in orow.iter().enumerate() {
                                    s += dy * wd[(c * cout + o) * k + kk];
                                }
                            }
                            g[ti * cin + c] += s;
                        }
                    }
                });
                acc(*w, &mut |g| {
                    for ti in 0..t {
                        for c in 0..cin {
                            let xv = xd[ti * cin + c];
                            for kk in 0..k {
                                let orow = &gy[(ti * stride + kk) * cout..(ti * stride + kk + 1) * cout];
                                for (o, dy) in orow.iter().enumerate() {
                                    g[(c * cout + o) * k + kk] += xv * dy;
                                }
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for row in gy.chunks(cout) {
                            kernels::add_into(g, row);
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).cols();
                acc(*table, &mut |g| {
                    for (row, &i) in gy.chunks(d).zip(ids) {
                        kernels::add_into(&mut g[i * d..(i + 1) * d], row);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |g| {
                        for (grow, dyrow) in g.chunks_mut(w).zip(gy.chunks(total)) {
                            kernels::add_into(grow, &dyrow[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    acc(p, &mut |g| kernels::add_into(g, &gy[off..off + n]));
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                acc(*x, &mut |g| kernels::add_into(&mut g[start * c..start * c + gy.len()], gy));
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let w = node.value.cols();
                acc(*x, &mut |g| {
                    for (grow, dyrow) in g.chunks_mut(c).zip(gy.chunks(w)) {
                        kernels::add_into(&mut grow[*start..start + w], dyrow);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += gy[0])),
            Op::Mean(x) => {
                let n = val(*x).numel().max(1) as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += gy[0] / n));
            }
            Op::MeanRows(x) => {
                let r = val(*x).rows() as f64;
                let c = node.value.cols();
                acc(*x, &mut |g| {
                    for grow in g.chunks_mut(c) {
                        grow.iter_mut().zip(gy).for_each(|(v, d)| *v += d / r);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = val(*logits).cols();
                let scale = gy[0] / targets.len().max(1) as f64;
                acc(*logits, &mut |g| {
                    for ((grow, prow), &t) in g.chunks_mut(c).zip(probs.chunks(c)).zip(targets) {
                        for (j, (gv, p)) in grow.iter_mut().zip(prow).enumerate() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            *gv += scale * (p - onehot);
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let z = val(*logits).data();
                let scale = gy[0] / targets.len().max(1) as f64;
                acc(*logits, &mut |g| {
                    for ((gv, &zv), &y) in g.iter_mut().zip(z).zip(targets) {
                        *gv += scale * (kernels::sigmoid(zv) - y);
                    }
                });
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let scale = 2.0 * gy[0] / ad.len().max(1) as f64;
                acc(*a, &mut |g| g.iter_mut().zip(ad).zip(bd).for_each(|((g, x), y)| *g += scale * (x - y)));
                acc(*b, &mut |g| g.iter_mut().zip(ad).zip(bd).for_each(|((g, x), y)| *g -= scale * (x - y)));
            }
            Op::StraightThrough(soft) => acc(*soft, &mut |g| kernels::add_into(g, gy)),
            Op::Diversity(p) => {
                let pd = val(*p).data();
                let v = pd.len() as f64;
                let perplexity = kernels::perplexity(pd);
                acc(*p, &mut |g| {
                    for (gv, &pi) in g.iter_mut().zip(pd) {
                        // d/dp (V − e^H)/V with dH/dp = −(ln p + 1)
                        let ln = pi.max(f64::MIN_POSITIVE).ln();
                        *gv += gy[0] * perplexity * (ln + 1.0) / v;
                    }
                });
            }
        }
    }
}

/// Gradients of every node after a backward sweep.
#[derive(Debug)]
pub struct GradTape {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl GradTape {
    /// Gradient with respect to a recorded node, `None` if unreachable.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter of `store`; unreachable ones are zero.
    pub fn param_grads(&self, store: &ParamStore) -> Gradients {
        let grads = store
            .ids()
            .map(|id| {
                let shape = store.get(id).shape().to_vec();
                match self.params.get(&id).and_then(|v| self.wrt(*v)) {
                    Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches parameter"),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect();
        Gradients::from_vec(grads)
    }
}
