// SPDX-License-Identifier: MIT OR Apache-2.0

//! Define-by-run reverse-mode tape.
//!
//! Every primitive appends a node holding its output value, so node order
//! is a topological order by construction. [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients into every node that
//! requires them. Nodes that no gradient-tracked input reaches are never
//! touched and keep an absent gradient.

use super::kernels::{gelu_derivative, gelu_scalar, softmax_axis, softmax_in_place};
use super::{gemm, Tensor};
use crate::error::{KnError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Replacement rule for a single element, used by [`Tape::override_elements`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OverrideMode {
    /// Multiply the element by a factor.
    Scale(f32),
    /// Replace the element with a constant.
    Set(f32),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    PickPerRow {
        x: Var,
        cols: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<f32>,
    },
    Override {
        x: Var,
        edits: Vec<(usize, OverrideMode)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    /// Inserts an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(KnError::Dimension(format!(
                "matmul of {:?} by {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(KnError::Dimension(format!(
                "matmul_nt of {:?} by transposed {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(KnError::Dimension(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// Adds a `[cols]` vector to every row of `a[rows×cols]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.dims2(a)?;
        if self.shape(row) != [cols] {
            return Err(KnError::Dimension(format!(
                "add_row of {:?} and {:?}",
                self.shape(a),
                self.shape(row)
            )));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_mut(cols) {
            for (x, y) in chunk.iter_mut().zip(&r) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&x| f64::from(x)).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = gelu_scalar(*x));
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(KnError::Dimension(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(x).clone();
        softmax_axis(out.data_mut(), outer, len, inner);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Normalises the last dimension to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(KnError::Dimension(format!(
                "layer_norm of {:?} with gain {:?} and bias {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x);
        let rows = xv.numel() / d.max(1);
        let mut xhat = vec![0.0f32; xv.numel()];
        let mut rstd = vec![0.0f32; rows];
        for (r, (src, dst)) in xv.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = src.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
            let var = src
                .iter()
                .map(|&v| (f64::from(v) - mean).powi(2))
                .sum::<f64>()
                / d as f64;
            let inv = 1.0 / (var + f64::from(eps)).sqrt();
            rstd[r] = inv as f32;
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = ((f64::from(v) - mean) * inv) as f32;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for chunk in out.chunks_mut(d) {
            for ((o, gi), bi) in chunk.iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean of `-log softmax(logits_b)[target_b]` over rows. A rank-1
    /// `logits` is treated as a single row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = match self.shape(logits) {
            [v] => (1, *v),
            [r, v] => (*r, *v),
            other => {
                return Err(KnError::Dimension(format!(
                    "cross_entropy expects [vocab] or [batch×vocab], got {other:?}"
                )))
            }
        };
        if targets.len() != rows || rows == 0 {
            return Err(KnError::Dimension(format!(
                "cross_entropy got {} targets for {rows} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(KnError::Index(format!(
                "target {bad} out of range for vocab {vocab}"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f64 = row.iter().map(|&v| f64::from(v - max).exp()).sum();
            let lse = f64::from(max) + sum.ln();
            total += lse - f64::from(row[t]);
            softmax_in_place(row);
        }
        let loss = (total / rows as f64) as f32;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Stacks rows `ids` of `table[rows×cols]` into `[ids.len()×cols]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(KnError::Index(format!(
                "row {bad} out of range for table with {rows} rows"
            )));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(src.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), cols], out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Picks `x[b, cols[b]]` for every row, producing a `[rows]` vector.
    pub fn pick_per_row(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (rows, width) = self.dims2(x)?;
        if cols.len() != rows {
            return Err(KnError::Dimension(format!(
                "pick_per_row got {} columns for {rows} rows",
                cols.len()
            )));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
            return Err(KnError::Index(format!(
                "column {bad} out of range for width {width}"
            )));
        }
        let src = self.value(x).data();
        let out = cols
            .iter()
            .enumerate()
            .map(|(r, &c)| src[r * width + c])
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows], out)?,
            Op::PickPerRow {
                x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention over ragged sequences.
    ///
    /// `q`, `k`, `v` are `[N×d]` with the rows of each sequence contiguous;
    /// `segments` lists `(first_row, len)` per sequence. Attention never
    /// crosses segment boundaries, so no padding is needed.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = self.dims2(q)?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return Err(KnError::Dimension(format!(
                "attention q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(KnError::Dimension(format!(
                "width {d} not divisible into {heads} heads"
            )));
        }
        if segments.iter().any(|&(s, l)| s + l > n) {
            return Err(KnError::Index("attention segment exceeds rows".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0f32; n * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s.1 * s.1).sum::<usize>() * heads);
        for &(start, len) in segments {
            for h in 0..heads {
                let off = h * dh;
                let base = probs.len();
                for i in 0..len {
                    let qi = &qd[(start + i) * d + off..(start + i) * d + off + dh];
                    for j in 0..len {
                        let kj = &kd[(start + j) * d + off..(start + j) * d + off + dh];
                        let dot: f32 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        probs.push(dot * scale);
                    }
                    softmax_in_place(&mut probs[base + i * len..base + (i + 1) * len]);
                }
                for i in 0..len {
                    let row = &mut out[(start + i) * d + off..(start + i) * d + off + dh];
                    for j in 0..len {
                        let p = probs[base + i * len + j];
                        let vj = &vd[(start + j) * d + off..(start + j) * d + off + dh];
                        for (o, x) in row.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Rewrites individual elements (by flat index) of `x`.
    ///
    /// With `track`, the output node requires a gradient even when `x`
    /// does not, so the gradient with respect to the rewritten values can
    /// be read back after [`Tape::backward`].
    pub fn override_elements(
        &mut self,
        x: Var,
        edits: &[(usize, OverrideMode)],
        track: bool,
    ) -> Result<Var> {
        let mut out = self.value(x).clone();
        let numel = out.numel();
        for &(idx, mode) in edits {
            let slot = out.data_mut().get_mut(idx).ok_or_else(|| {
                KnError::Index(format!("override index {idx} out of range for {numel}"))
            })?;
            match mode {
                OverrideMode::Scale(f) => *slot *= f,
                OverrideMode::Set(v) => *slot = v,
            }
        }
        let rg = self.rg(x) || track;
        Ok(self.push(
            out,
            Op::Override {
                x,
                edits: edits.to_vec(),
            },
            rg,
        ))
    }

    /// Accumulates gradients of the scalar `loss` into every reachable
    /// node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(KnError::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(KnError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        let shape = self.shape(loss).to_vec();
        self.grads[loss.0] = Some(Tensor::new(shape, vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, g.data());
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, contrib).expect("gradient shape"));
            }
        }
    }

    fn backprop_node(&mut self, idx: usize, g: &[f32]) {
        // Gradient contributions are computed against immutable node data
        // first, then accumulated.
        let mut contribs: Vec<(Var, Vec<f32>)> = Vec::new();
        let node = &self.nodes[idx];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().expect("matrix");
                let n = val(*b).shape()[1];
                if rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, val(*b).data(), true, 0.0, &mut da);
                    contribs.push((*a, da));
                }
                if rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a).data(), true, g, false, 0.0, &mut db);
                    contribs.push((*b, db));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = val(*a).dims2().expect("matrix");
                let n = val(*b).shape()[0];
                if rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, val(*b).data(), false, 0.0, &mut da);
                    contribs.push((*a, da));
                }
                if rg(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g, true, val(*a).data(), false, 0.0, &mut db);
                    contribs.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    contribs.push((*a, g.to_vec()));
                }
                if rg(*b) {
                    contribs.push((*b, g.to_vec()));
                }
            }
            Op::AddRow(a, row) => {
                if rg(*a) {
                    contribs.push((*a, g.to_vec()));
                }
                if rg(*row) {
                    let cols = val(*row).numel();
                    let mut dr = vec![0.0; cols];
                    for chunk in g.chunks(cols) {
                        for (d, x) in dr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    contribs.push((*row, dr));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let d = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    contribs.push((*a, d));
                }
                if rg(*b) {
                    let d = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    contribs.push((*b, d));
                }
            }
            Op::Scale(a, c) => {
                if rg(*a) {
                    contribs.push((*a, g.iter().map(|x| x * c).collect()));
                }
            }
            Op::Sum(a) => {
                if rg(*a) {
                    contribs.push((*a, vec![g[0]; val(*a).numel()]));
                }
            }
            Op::Gelu(a) => {
                if rg(*a) {
                    let d = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(gi, &x)| gi * gelu_derivative(x))
                        .collect();
                    contribs.push((*a, d));
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if rg(*x) {
                    let y = node.value.data();
                    let mut dx = vec![0.0f32; y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let dot: f32 = (0..*len)
                                .map(|j| g[base + j * inner] * y[base + j * inner])
                                .sum();
                            for j in 0..*len {
                                let p = base + j * inner;
                                dx[p] = y[p] * (g[p] - dot);
                            }
                        }
                    }
                    contribs.push((*x, dx));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = val(*gain).numel();
                let gv = val(*gain).data();
                if rg(*x) {
                    let mut dx = vec![0.0f32; xhat.len()];
                    for (r, ((gr, xr), dr)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(dx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut mean_dxhat = 0.0f64;
                        let mut mean_dxhat_xhat = 0.0f64;
                        for j in 0..d {
                            let dxh = f64::from(gr[j] * gv[j]);
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * f64::from(xr[j]);
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        let inv = f64::from(rstd[r]);
                        for j in 0..d {
                            let dxh = f64::from(gr[j] * gv[j]);
                            dr[j] = (inv
                                * (dxh - mean_dxhat - f64::from(xr[j]) * mean_dxhat_xhat))
                                as f32;
                        }
                    }
                    contribs.push((*x, dx));
                }
                if rg(*gain) {
                    let mut dg = vec![0.0f32; d];
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    contribs.push((*gain, dg));
                }
                if rg(*bias) {
                    let mut db = vec![0.0f32; d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    contribs.push((*bias, db));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if rg(*logits) {
                    let rows = targets.len();
                    let vocab = probs.len() / rows;
                    let s = g[0] / rows as f32;
                    let mut d: Vec<f32> = probs.iter().map(|p| p * s).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        d[r * vocab + t] -= s;
                    }
                    contribs.push((*logits, d));
                }
            }
            Op::GatherRows { table, ids } => {
                if rg(*table) {
                    let (rows, cols) = val(*table).dims2().expect("matrix");
                    let mut dt = vec![0.0f32; rows * cols];
                    for (gr, &id) in g.chunks(cols).zip(ids) {
                        for (d, x) in dt[id * cols..(id + 1) * cols].iter_mut().zip(gr) {
                            *d += x;
                        }
                    }
                    contribs.push((*table, dt));
                }
            }
            Op::PickPerRow { x, cols } => {
                if rg(*x) {
                    let (rows, width) = val(*x).dims2().expect("matrix");
                    let mut dx = vec![0.0f32; rows * width];
                    for (r, &c) in cols.iter().enumerate() {
                        dx[r * width + c] = g[r];
                    }
                    contribs.push((*x, dx));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (n, d) = val(*q).dims2().expect("matrix");
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![0.0f32; n * d];
                let mut dk = vec![0.0f32; n * d];
                let mut dv = vec![0.0f32; n * d];
                let mut base = 0usize;
                let mut dp = Vec::new();
                for &(start, len) in segments {
                    for h in 0..*heads {
                        let off = h * dh;
                        let p = &probs[base..base + len * len];
                        dp.clear();
                        dp.resize(len * len, 0.0f32);
                        for i in 0..len {
                            let gi = &g[(start + i) * d + off..(start + i) * d + off + dh];
                            for j in 0..len {
                                let r = (start + j) * d + off;
                                let vj = &vd[r..r + dh];
                                dp[i * len + j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                let pij = p[i * len + j];
                                for (o, x) in dv[r..r + dh].iter_mut().zip(gi) {
                                    *o += pij * x;
                                }
                            }
                        }
                        for i in 0..len {
                            let row = i * len..(i + 1) * len;
                            let dot: f32 =
                                dp[row.clone()].iter().zip(&p[row.clone()]).map(|(a, b)| a * b).sum();
                            for j in 0..len {
                                let ds = p[i * len + j] * (dp[i * len + j] - dot) * scale;
                                let ri = (start + i) * d + off;
                                let rj = (start + j) * d + off;
                                for c in 0..dh {
                                    dq[ri + c] += ds * kd[rj + c];
                                    dk[rj + c] += ds * qd[ri + c];
                                }
                            }
                        }
                        base += len * len;
                    }
                }
                if rg(*q) {
                    contribs.push((*q, dq));
                }
                if rg(*k) {
                    contribs.push((*k, dk));
                }
                if rg(*v) {
                    contribs.push((*v, dv));
                }
            }
            Op::Override { x, edits } => {
                if rg(*x) {
                    let mut dx = g.to_vec();
                    for &(idx, mode) in edits {
                        match mode {
                            OverrideMode::Scale(f) => dx[idx] *= f,
                            OverrideMode::Set(_) => dx[idx] = 0.0,
                        }
                    }
                    contribs.push((*x, dx));
                }
            }
        }
        for (v, c) in contribs {
            self.accumulate(v, c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(tape: &mut Tape, rows: usize, cols: usize, data: &[f32], rg: bool) -> Var {
        tape.leaf(Tensor::new(vec![rows, cols], data.to_vec()).unwrap(), rg)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::new();
        let i = mat(&mut t, 2, 2, &[1.0, 0.0, 0.0, 1.0], false);
        let b = mat(&mut t, 2, 2, &[3.0, 4.0, 5.0, 6.0], false);
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let r = mat(&mut t, 1, 2, &[1.0, 2.0], false);
        let col = mat(&mut t, 2, 1, &[3.0, 4.0], false);
        let d = t.matmul(r, col).unwrap();
        assert_eq!(t.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = mat(&mut t, 2, 3, &[0.0; 6], false);
        let b = mat(&mut t, 2, 3, &[0.0; 6], false);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 3, 2], vec![0.5; 12]).unwrap(), true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0; 12]);
    }

    #[test]
    fn backward_of_square() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![2.0, 3.0]), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(t.backward(x), Err(KnError::Contract(_))));
    }

    #[test]
    fn unreachable_nodes_keep_no_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let y = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let c = t.leaf(Tensor::from_vec(vec![5.0, 5.0]), false);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(t.grad(x).is_some());
        assert!(t.grad(y).is_none());
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::from_vec(vec![0.3; 4]), false);
        for target in 0..4 {
            let ce = t.cross_entropy(l, &[target]).unwrap();
            assert!((t.value(ce).data()[0] - 4f32.ln()).abs() < 1e-6);
        }
        let mut logits = vec![0.0f32; 10];
        logits[3] = 20.0;
        let l = t.leaf(Tensor::from_vec(logits), false);
        let ce = t.cross_entropy(l, &[3]).unwrap();
        assert!(t.value(ce).data()[0] < 1e-6);
        assert!(matches!(t.cross_entropy(l, &[10]), Err(KnError::Index(_))));
    }

    #[test]
    fn layer_norm_reference_cases() {
        let mut t = Tape::new();
        let g = t.leaf(Tensor::from_vec(vec![1.0, 1.0]), false);
        let b = t.leaf(Tensor::from_vec(vec![0.0, 0.0]), false);
        let x = mat(&mut t, 1, 2, &[1.0, 3.0], false);
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        let out = t.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-4 && (out[1] - 1.0).abs() < 1e-4);

        let g4 = t.leaf(Tensor::from_vec(vec![2.0; 4]), false);
        let b4 = t.leaf(Tensor::from_vec(vec![0.0; 4]), false);
        let c = mat(&mut t, 1, 4, &[7.0; 4], false);
        let y = t.layer_norm(c, g4, b4, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn override_unit_scale_is_bitwise_noop() {
        let mut t = Tape::new();
        let x = mat(&mut t, 2, 3, &[0.1, -0.2, 0.3, -0.0, 5.5, 1e-30], false);
        let edits: Vec<_> = (0..6).map(|i| (i, OverrideMode::Scale(1.0))).collect();
        let y = t.override_elements(x, &edits, false).unwrap();
        let a: Vec<u32> = t.value(x).data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = t.value(y).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn tracked_override_exposes_gradient_of_set_values() {
        // y = override(x)·w, with x constant; gradient w.r.t. the set value is w.
        let mut t = Tape::new();
        let x = mat(&mut t, 1, 2, &[1.0, 1.0], false);
        let w = mat(&mut t, 2, 1, &[3.0, -2.0], false);
        let y = t
            .override_elements(x, &[(0, OverrideMode::Set(0.5))], true)
            .unwrap();
        let out = t.matmul(y, w).unwrap();
        let s = t.sum(out);
        t.backward(s).unwrap();
        assert_eq!(t.grad(y).unwrap().data(), &[3.0, -2.0]);
        assert!(t.grad(x).is_none());
        assert!((t.value(s).data()[0] - (0.5 * 3.0 - 2.0)).abs() < 1e-7);
    }
}
