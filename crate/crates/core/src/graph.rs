//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every intermediate tensor of one forward pass. Operations
//! append nodes in creation order, which is a valid topological order, so
//! [`Graph::backward`] simply walks the tape in reverse.
//!
//! Gradients accumulate: calling `backward` twice without
//! [`Graph::zero_grad`] adds the second pass on top of the first.
//!
//! Broadcasting is limited to leading axes: in a binary op the smaller
//! operand's shape must be a suffix of the larger one's.

use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::sparse::Csr;
use crate::tensor::{invalid_rank, matmul_into, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Row { x: Var, row: usize },
    Conv1d { x: Var, w: Var, b: Var, padding: usize },
    SparseMatMul(Arc<Csr>, Var),
    Sum(Var),
    Bce { p: Var, target: Arc<[f64]>, weight: Arc<[f64]> },
    SqErr { p: Var, target: Arc<[f64]>, weight: Arc<[f64]> },
    SmoothL1 { p: Var, target: Arc<[f64]>, weight: Arc<[f64]>, beta: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside logarithms.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            grad: requires_grad.then(|| Tensor::zeros(value.shape())),
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                g.data_mut().fill(0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            grad: None,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        use ElementwiseKind::*;
        match (kind, b) {
            (Add | Sub | Mul, Some(b)) => self.binary(kind, a, b),
            (Add | Sub | Mul, None) => Err(invalid!("{kind:?} needs two operands")),
            (Sigmoid, None) => Ok(self.sigmoid(a)),
            (Tanh, None) => Ok(self.tanh(a)),
            (Relu, None) => Ok(self.relu(a)),
            (_, Some(_)) => Err(invalid!("{kind:?} takes one operand")),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseKind::Mul, a, b)
    }

    fn binary(&mut self, kind: ElementwiseKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| {
            Error::shape(
                match kind {
                    ElementwiseKind::Add => "add",
                    ElementwiseKind::Sub => "sub",
                    _ => "mul",
                },
                sa,
                sb,
            )
        })?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let f: fn(f64, f64) -> f64 = match kind {
            ElementwiseKind::Add => |x, y| x + y,
            ElementwiseKind::Sub => |x, y| x - y,
            _ => |x, y| x * y,
        };
        let data = (0..n).map(|i| f(da[i % da.len()], db[i % db.len()])).collect();
        let value = Tensor::new(out_shape, data)?;
        let op = match kind {
            ElementwiseKind::Add => Op::Add(a, b),
            ElementwiseKind::Sub => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    // ---------------------------------------------------------------
    // Linear algebra and layout
    // ---------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid!("concat_cols: no inputs"))?;
        let (rows, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks equally sized tensors as rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or_else(|| invalid!("stack_rows: no inputs"))?;
        let width = self.value(first).len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if self.value(r).len() != width {
                return Err(Error::shape("stack_rows", self.shape(first), self.shape(r)));
            }
            data.extend_from_slice(self.value(r).data());
        }
        let value = Tensor::matrix(rows.len(), width, data)?;
        Ok(self.push(value, Op::StackRows(rows.to_vec()), rows))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + len > cols {
            return Err(invalid!("slice_cols: {start}+{len} exceeds {cols} columns"));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let value = Tensor::matrix(rows, len, data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Row `row` of a matrix, as a `1×C` matrix.
    pub fn row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if row >= rows {
            return Err(invalid!("row {row} out of range for {rows} rows"));
        }
        let value = Tensor::matrix(1, cols, self.value(x).row(row).to_vec())?;
        Ok(self.push(value, Op::Row { x, row }, &[x]))
    }

    /// Cross-correlation of `x[C_in×T]` with `w[C_out×C_in×k]` plus `b[C_out]`,
    /// zero-padded by `padding` on both sides.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, padding: usize) -> Result<Var> {
        let (c_in, t) = self.value(x).dims2()?;
        let ws = self.shape(w).to_vec();
        let [c_out, wc_in, k] = ws[..] else {
            return Err(invalid_rank("conv1d weight", &ws, 3));
        };
        if wc_in != c_in {
            return Err(Error::shape("conv1d", self.shape(x), &ws));
        }
        if self.shape(b) != [c_out] {
            return Err(Error::shape("conv1d bias", &ws, self.shape(b)));
        }
        if t + 2 * padding < k {
            return Err(invalid!(
                "conv1d: length {t} with padding {padding} is shorter than kernel {k}"
            ));
        }
        let t_out = t + 2 * padding + 1 - k;
        let cols = im2col(self.value(x).data(), c_in, t, k, padding, t_out);
        let mut out = vec![0.0; c_out * t_out];
        matmul_into(self.value(w).data(), &cols, &mut out, c_out, c_in * k, t_out);
        let bias = self.value(b).data();
        for (o, row) in out.chunks_mut(t_out).enumerate() {
            for v in row {
                *v += bias[o];
            }
        }
        let value = Tensor::matrix(c_out, t_out, out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, padding }, &[x, w, b]))
    }

    /// `s · x` for a constant sparse matrix `s`.
    pub fn sparse_matmul(&mut self, s: Arc<Csr>, x: Var) -> Result<Var> {
        let (t, e) = self.value(x).dims2()?;
        if s.cols() != t {
            return Err(Error::shape("sparse_matmul", &[s.rows(), s.cols()], self.shape(x)));
        }
        let out = s.matmul_dense(self.value(x).data(), e);
        let value = Tensor::matrix(s.rows(), e, out)?;
        Ok(self.push(value, Op::SparseMatMul(s, x), &[x]))
    }

    // ---------------------------------------------------------------
    // Reductions and losses
    // ---------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn check_loss_args(&self, op: &'static str, p: Var, target: &[f64], weight: &[f64]) -> Result<()> {
        let n = self.value(p).len();
        if target.len() != n || weight.len() != n {
            return Err(Error::shape(op, self.shape(p), &[target.len(), weight.len()]));
        }
        if !self.value(p).is_finite() {
            return Err(Error::NonFinite(format!("{op}: prediction")));
        }
        Ok(())
    }

    /// `Σ wᵢ · BCE(pᵢ, tᵢ)` for probabilities `p`.
    pub fn weighted_bce(&mut self, p: Var, target: &[f64], weight: &[f64]) -> Result<Var> {
        self.check_loss_args("weighted_bce", p, target, weight)?;
        let loss = self
            .value(p)
            .data()
            .iter()
            .zip(target)
            .zip(weight)
            .map(|((&p, &t), &w)| {
                let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -w * (t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .sum();
        let op = Op::Bce {
            p,
            target: target.into(),
            weight: weight.into(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[p]))
    }

    /// `Σ wᵢ · (pᵢ − tᵢ)²`.
    pub fn weighted_sq_err(&mut self, p: Var, target: &[f64], weight: &[f64]) -> Result<Var> {
        self.check_loss_args("weighted_sq_err", p, target, weight)?;
        let loss = self
            .value(p)
            .data()
            .iter()
            .zip(target)
            .zip(weight)
            .map(|((&p, &t), &w)| w * (p - t) * (p - t))
            .sum();
        let op = Op::SqErr {
            p,
            target: target.into(),
            weight: weight.into(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[p]))
    }

    /// `Σ wᵢ · smoothL1_β(pᵢ − tᵢ)`, quadratic below `beta`.
    pub fn weighted_smooth_l1(&mut self, p: Var, target: &[f64], weight: &[f64], beta: f64) -> Result<Var> {
        self.check_loss_args("weighted_smooth_l1", p, target, weight)?;
        if beta <= 0.0 {
            return Err(invalid!("smooth_l1: beta must be positive, got {beta}"));
        }
        let loss = self
            .value(p)
            .data()
            .iter()
            .zip(target)
            .zip(weight)
            .map(|((&p, &t), &w)| w * smooth_l1(p - t, beta))
            .sum();
        let op = Op::SmoothL1 {
            p,
            target: target.into(),
            weight: weight.into(),
            beta,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[p]))
    }

    // ---------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires a gradient,
    /// adding into the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(invalid!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(up) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &up, &mut adj)?;
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(g) => {
                    for (gv, u) in g.data_mut().iter_mut().zip(&up) {
                        *gv += u;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), up)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, up: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                send(*a, &|g| accumulate_broadcast(g, up, 1.0));
                send(*b, &|g| accumulate_broadcast(g, up, sign));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &|g| {
                    let n = g.len();
                    for (k, u) in up.iter().enumerate() {
                        g[k % n] += u * db[k % db.len()];
                    }
                });
                send(*b, &|g| {
                    let n = g.len();
                    for (k, u) in up.iter().enumerate() {
                        g[k % n] += u * da[k % da.len()];
                    }
                });
            }
            Op::Scale(a, c) => send(*a, &|g| {
                for (gv, u) in g.iter_mut().zip(up) {
                    *gv += u * c;
                }
            }),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                send(*a, &|g| {
                    for ((gv, u), y) in g.iter_mut().zip(up).zip(y) {
                        *gv += u * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                send(*a, &|g| {
                    for ((gv, u), y) in g.iter_mut().zip(up).zip(y) {
                        *gv += u * (1.0 - y * y);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                send(*a, &|g| {
                    for ((gv, u), x) in g.iter_mut().zip(up).zip(x) {
                        if *x > 0.0 {
                            *gv += u;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                // dA = up · Bᵀ, dB = Aᵀ · up
                send(*a, &|g| matmul_nt_acc(up, db, g, m, n, k));
                send(*b, &|g| matmul_tn_acc(da, up, g, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = node.value.dims2()?;
                send(*a, &|g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j * r + i] += up[i * c + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => send(*a, &|g| {
                for (gv, u) in g.iter_mut().zip(up) {
                    *gv += u;
                }
            }),
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2()?.1;
                    send(p, &|g| {
                        for r in 0..rows {
                            let src = &up[r * total + offset..r * total + offset + w];
                            for (gv, u) in g[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *gv += u;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::StackRows(rows) => {
                let width = node.value.dims2()?.1;
                for (r, &v) in rows.iter().enumerate() {
                    send(v, &|g| {
                        for (gv, u) in g.iter_mut().zip(&up[r * width..(r + 1) * width]) {
                            *gv += u;
                        }
                    });
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = node.value.dims2()?;
                let cols = self.value(*x).dims2()?.1;
                send(*x, &|g| {
                    for r in 0..rows {
                        let dst = &mut g[r * cols + start..r * cols + start + len];
                        for (gv, u) in dst.iter_mut().zip(&up[r * len..(r + 1) * len]) {
                            *gv += u;
                        }
                    }
                });
            }
            Op::Row { x, row } => {
                let cols = node.value.len();
                send(*x, &|g| {
                    for (gv, u) in g[row * cols..(row + 1) * cols].iter_mut().zip(up) {
                        *gv += u;
                    }
                });
            }
            Op::Conv1d { x, w, b, padding } => {
                let (c_in, t) = self.value(*x).dims2()?;
                let ws = self.shape(*w);
                let (c_out, k) = (ws[0], ws[2]);
                let t_out = node.value.dims2()?.1;
                let ck = c_in * k;
                send(*b, &|g| {
                    for (o, row) in up.chunks(t_out).enumerate() {
                        g[o] += row.iter().sum::<f64>();
                    }
                });
                if self.requires_grad(*w) {
                    let cols = im2col(self.value(*x).data(), c_in, t, k, *padding, t_out);
                    // dW = up · colsᵀ
                    send(*w, &|g| matmul_nt_acc(up, &cols, g, c_out, t_out, ck));
                }
                let wd = self.value(*w).data();
                send(*x, &|g| {
                    // dcols = Wᵀ · up, then scatter back
                    let mut dcols = vec![0.0; ck * t_out];
                    matmul_tn_acc(wd, up, &mut dcols, c_out, ck, t_out);
                    col2im_acc(&dcols, g, c_in, t, k, *padding, t_out);
                });
            }
            Op::SparseMatMul(s, x) => {
                let e = self.value(*x).dims2()?.1;
                send(*x, &|g| s.matmul_transpose_acc(up, e, g));
            }
            Op::Sum(a) => send(*a, &|g| {
                for gv in g.iter_mut() {
                    *gv += up[0];
                }
            }),
            Op::Bce { p, target, weight } => {
                let pd = self.value(*p).data();
                send(*p, &|g| {
                    for (k, gv) in g.iter_mut().enumerate() {
                        let pc = pd[k].clamp(BCE_EPS, 1.0 - BCE_EPS);
                        let t = target[k];
                        *gv += up[0] * weight[k] * (-t / pc + (1.0 - t) / (1.0 - pc));
                    }
                });
            }
            Op::SqErr { p, target, weight } => {
                let pd = self.value(*p).data();
                send(*p, &|g| {
                    for (k, gv) in g.iter_mut().enumerate() {
                        *gv += up[0] * weight[k] * 2.0 * (pd[k] - target[k]);
                    }
                });
            }
            Op::SmoothL1 { p, target, weight, beta } => {
                let pd = self.value(*p).data();
                send(*p, &|g| {
                    for (k, gv) in g.iter_mut().enumerate() {
                        let d = pd[k] - target[k];
                        let dd = if d.abs() < *beta { d / beta } else { d.signum() };
                        *gv += up[0] * weight[k] * dd;
                    }
                });
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        Some(a.to_vec())
    } else if a.len() > b.len() && a.ends_with(b) {
        Some(a.to_vec())
    } else if b.len() > a.len() && b.ends_with(a) {
        Some(b.to_vec())
    } else {
        None
    }
}

/// Sum-reduces `up` over broadcast leading axes into `g`.
fn accumulate_broadcast(g: &mut [f64], up: &[f64], sign: f64) {
    let n = g.len();
    for (k, u) in up.iter().enumerate() {
        g[k % n] += sign * u;
    }
}

fn im2col(x: &[f64], c_in: usize, t: usize, k: usize, padding: usize, t_out: usize) -> Vec<f64> {
    let mut cols = vec![0.0; c_in * k * t_out];
    for c in 0..c_in {
        for j in 0..k {
            let row = &mut cols[(c * k + j) * t_out..(c * k + j + 1) * t_out];
            for (to, v) in row.iter_mut().enumerate() {
                let src = to + j;
                if src >= padding && src - padding < t {
                    *v = x[c * t + src - padding];
                }
            }
        }
    }
    cols
}

fn col2im_acc(dcols: &[f64], g: &mut [f64], c_in: usize, t: usize, k: usize, padding: usize, t_out: usize) {
    for c in 0..c_in {
        for j in 0..k {
            let row = &dcols[(c * k + j) * t_out..(c * k + j + 1) * t_out];
            for (to, v) in row.iter().enumerate() {
                let src = to + j;
                if src >= padding && src - padding < t {
                    g[c * t + src - padding] += v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(g: &mut Graph, xs: &[f64]) -> Var {
        g.param(Tensor::vector(xs.to_vec()))
    }

    #[test]
    fn add_componentwise() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1., 2.]);
        let b = vec_leaf(&mut g, &[3., 4.]);
        let c = g.elementwise(ElementwiseKind::Add, a, Some(b)).unwrap();
        assert_eq!(g.value(c).data(), &[4., 6.]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[0.]);
        let s = g.elementwise(ElementwiseKind::Sigmoid, a, None).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1., 2., 3.]);
        let y = g.mul(x, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[0.3, -1.0, 2.0, 5.0, 0.0]);
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 5]);
    }

    #[test]
    fn sigmoid_sum_gradient_at_zero() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[0.0; 4]);
        let s = g.sigmoid(x);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1., 2.]);
        let l = g.sum(x);
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 2.]);
        g.zero_grad();
        assert_eq!(g.grad(x).unwrap().data(), &[0., 0.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1., 2.]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap());
        let m = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

        let a = g.constant(Tensor::matrix(1, 2, vec![1., 2.]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![3., 4.]).unwrap());
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.]);

        let err = g.matmul(a, a).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn broadcast_gradient_sums_over_leading_axes() {
        let mut g = Graph::new();
        let a = g.param(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.param(Tensor::vector(vec![10., 20.]));
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[10., 40., 30., 80., 50., 120.]);
        let l = g.sum(c);
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[9., 12.]);
        assert_eq!(g.grad(a).unwrap().data(), &[10., 20., 10., 20., 10., 20.]);
    }

    #[test]
    fn conv1d_hand_example() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![1., 2., 3.]).unwrap());
        let w = g.constant(Tensor::new(vec![1, 1, 3], vec![1., 1., 1.]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.]));
        let y = g.conv1d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).data(), &[3., 6., 5.]);
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let mut g = Graph::new();
        let p = g.param(Tensor::full(&[4], 0.5));
        let l = g.weighted_bce(p, &[1., 0., 1., 0.], &[0.25; 4]).unwrap();
        assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
    }
}
