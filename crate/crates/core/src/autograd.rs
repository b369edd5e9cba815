//! Reverse-mode differentiation over an explicitly constructed graph.
//!
//! A [`Graph`] owns every intermediate value of one evaluation. Operations
//! append nodes that record their inputs; [`Graph::backward`] walks the nodes
//! in reverse creation order, which is a valid topological order because an
//! operation can only reference nodes created before it. There is no global
//! tape, so independent graphs can be built side by side or on different
//! threads.
//!
//! Matrix products accumulate in `f64`, as do all row statistics and
//! reductions. Stored values and gradients are `f32`.

use std::collections::BTreeMap;

use crate::error::{ensure, Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddRow(Var, Var),
    MulRow(Var, Var),
    LayerNorm { input: Var, rstd: Vec<f32> },
    Gelu(Var),
    Silu(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f32> },
    ConcatRows(Vec<Var>),
    SliceRows { input: Var, start: usize },
    SliceCols { input: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients of one scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(self.shapes[v.0].clone(), g.clone()))
    }
}

pub(crate) fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// `C[m×n] = A[m×k] · B[k×n]` with explicit strides, `f64` throughout.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    b_rs: usize,
    b_cs: usize,
) -> Vec<f64> {
    let mut c = vec![0.0f64; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: strides describe views that stay within the given slices; the
    // output buffer is exactly m×n row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        _ => {
            let cols = *shape.last().unwrap();
            let rows = shape[..shape.len() - 1].iter().product();
            (rows, cols)
        }
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter as a leaf. Frozen parameters are bound as
    /// constants, so no gradient is ever computed for them. Repeated binds of
    /// the same name return the same node.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))?;
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            Shape,
            "matmul {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = to_f64(self.value(a).data());
        let bv = to_f64(self.value(b).data());
        let c = dgemm(m, k, n, &av, k, 1, &bv, n, 1);
        let out = Tensor::from_vec(vec![m, n], c.into_iter().map(|x| x as f32).collect());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x · w + b` with `w` stored as `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.value(a).zip_map(self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    fn row_check(&self, a: Var, row: Var) -> Result<(usize, usize)> {
        let (rows, cols) = rows_cols(self.shape(a));
        ensure!(
            self.value(row).len() == cols,
            Shape,
            "row operand {:?} against {:?}",
            self.shape(row),
            self.shape(a)
        );
        Ok((rows, cols))
    }

    /// Adds a `[d]` (or `[1, d]`) row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.row_check(a, row)?;
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % cols])
            .collect();
        let out = Tensor::from_vec(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a` elementwise by a `[d]` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.row_check(a, row)?;
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * r[i % cols])
            .collect();
        let out = Tensor::from_vec(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    /// Row-wise normalization to zero mean and unit variance, no affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let (rows, cols) = rows_cols(self.shape(a));
        let x = self.value(a).data();
        let mut out = vec![0.0f32; x.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = ((v as f64 - mean) * rs) as f32;
            }
            rstd.push(rs as f32);
        }
        let out = Tensor::from_vec(self.shape(a).to_vec(), out);
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm { input: a, rstd }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    /// Multi-head scaled dot-product attention without masking.
    /// `q: [nq, d]`, `k, v: [nk, d]`, `d` divisible by `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        ensure!(
            sq.len() == 2 && sk.len() == 2 && sk == sv && sq[1] == sk[1],
            Shape,
            "attention q {:?} k {:?} v {:?}",
            sq,
            sk,
            sv
        );
        let (nq, d, nk) = (sq[0], sq[1], sk[0]);
        ensure!(heads > 0 && d % heads == 0, Shape, "{} heads over width {}", heads, d);
        ensure!(nk > 0, Shape, "attention over an empty key set");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = to_f64(self.value(q).data());
        let kv = to_f64(self.value(k).data());
        let vv = to_f64(self.value(v).data());
        let mut probs = vec![0.0f32; heads * nq * nk];
        let mut out = vec![0.0f32; nq * d];
        for h in 0..heads {
            let off = h * dh;
            let s = dgemm(nq, dh, nk, &qv[off..], d, 1, &kv[off..], 1, d);
            let mut p = vec![0.0f64; nq * nk];
            for r in 0..nq {
                let row = &s[r * nk..(r + 1) * nk];
                let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
                let mut z = 0.0;
                for c in 0..nk {
                    let e = (row[c] * scale - mx).exp();
                    p[r * nk + c] = e;
                    z += e;
                }
                for c in 0..nk {
                    p[r * nk + c] /= z;
                    probs[(h * nq + r) * nk + c] = p[r * nk + c] as f32;
                }
            }
            let o = dgemm(nq, nk, dh, &p, nk, 1, &vv[off..], d, 1);
            for r in 0..nq {
                for c in 0..dh {
                    out[r * d + off + c] = o[r * dh + c] as f32;
                }
            }
        }
        let out = Tensor::from_vec(vec![nq, d], out);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Concatenates 2-D nodes along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Shape, "nothing to concatenate");
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_leading(&refs)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_leading(start, end)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows { input: a, start }, rg))
    }

    /// Columns `[start, end)` of a 2-D node.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        ensure!(
            s.len() == 2 && start <= end && end <= s[1],
            Shape,
            "column slice {}..{} of {:?}",
            start,
            end,
            s
        );
        let (rows, cols) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&x[r * cols + start..r * cols + end]);
        }
        let out = Tensor::from_vec(vec![rows, end - start], data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols { input: a, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum() as f32);
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean() as f32);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Mean squared difference, reduced to a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure!(ta.shape() == tb.shape(), Shape, "mse {:?} vs {:?}", ta.shape(), tb.shape());
        let n = ta.len().max(1) as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum();
        let out = Tensor::scalar((s / n) as f32);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mse(a, b), rg))
    }

    /// Gradient of the scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        ensure!(lv.len() == 1, Invalid, "loss must be scalar, got shape {:?}", lv.shape());
        for (i, node) in self.nodes[..=loss.0].iter().enumerate() {
            if !node.value.all_finite() {
                return Err(Error::NonFinite(format!("node {i} has non-finite values in forward pass")));
            }
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let g = to_f64(gy);
                if self.rg(*a) {
                    let bv = to_f64(self.value(*b).data());
                    // dA = dC · Bᵀ
                    let da = dgemm(m, n, k, &g, n, 1, &bv, 1, n);
                    accumulate(&mut grads[a.0], da.into_iter().map(|x| x as f32).collect());
                }
                if self.rg(*b) {
                    let av = to_f64(self.value(*a).data());
                    // dB = Aᵀ · dC
                    let db = dgemm(k, m, n, &av, 1, k, &g, n, 1);
                    accumulate(&mut grads[b.0], db.into_iter().map(|x| x as f32).collect());
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], gy.to_vec());
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], gy.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], gy.to_vec());
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], gy.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    accumulate(&mut grads[a.0], gy.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    accumulate(&mut grads[b.0], gy.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], gy.iter().map(|g| g * c).collect());
            }
            Op::AddRow(a, row) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], gy.to_vec());
                }
                if self.rg(*row) {
                    let cols = self.value(*row).len();
                    let mut acc = vec![0.0f64; cols];
                    for (i, &g) in gy.iter().enumerate() {
                        acc[i % cols] += g as f64;
                    }
                    accumulate(&mut grads[row.0], acc.into_iter().map(|x| x as f32).collect());
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row).data();
                let cols = r.len();
                if self.rg(*a) {
                    let ga = gy.iter().enumerate().map(|(i, &g)| g * r[i % cols]).collect();
                    accumulate(&mut grads[a.0], ga);
                }
                if self.rg(*row) {
                    let x = self.value(*a).data();
                    let mut acc = vec![0.0f64; cols];
                    for (i, (&g, &xv)) in gy.iter().zip(x).enumerate() {
                        acc[i % cols] += g as f64 * xv as f64;
                    }
                    accumulate(&mut grads[row.0], acc.into_iter().map(|x| x as f32).collect());
                }
            }
            Op::LayerNorm { input, rstd } => {
                let y = node.value.data();
                let (rows, cols) = rows_cols(node.value.shape());
                let mut gx = vec![0.0f32; y.len()];
                for r in 0..rows {
                    let gr = &gy[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let mean_g = gr.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
                    let mean_gy = gr
                        .iter()
                        .zip(yr)
                        .map(|(&g, &yy)| g as f64 * yy as f64)
                        .sum::<f64>()
                        / cols as f64;
                    let rs = rstd[r] as f64;
                    for c in 0..cols {
                        gx[r * cols + c] =
                            (rs * (gr[c] as f64 - mean_g - yr[c] as f64 * mean_gy)) as f32;
                    }
                }
                accumulate(&mut grads[input.0], gx);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                accumulate(
                    &mut grads[a.0],
                    gy.iter().zip(x).map(|(&g, &xv)| g * gelu_grad(xv)).collect(),
                );
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let gx = gy
                    .iter()
                    .zip(x)
                    .map(|(&g, &xv)| {
                        let s = sigmoid(xv);
                        g * s * (1.0 + xv * (1.0 - s))
                    })
                    .collect();
                accumulate(&mut grads[a.0], gx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.backprop_attention(*q, *k, *v, *heads, probs, gy, grads);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.rg(*p) {
                        accumulate(&mut grads[p.0], gy[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::SliceRows { input, start } => {
                let src = self.value(*input);
                let stride: usize = src.shape()[1..].iter().product();
                let mut g = vec![0.0f32; src.len()];
                g[start * stride..start * stride + gy.len()].copy_from_slice(gy);
                accumulate(&mut grads[input.0], g);
            }
            Op::SliceCols { input, start } => {
                let src = self.shape(*input);
                let (rows, cols) = (src[0], src[1]);
                let w = node.value.shape()[1];
                let mut g = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    g[r * cols + start..r * cols + start + w].copy_from_slice(&gy[r * w..(r + 1) * w]);
                }
                accumulate(&mut grads[input.0], g);
            }
            Op::Reshape(a) => accumulate(&mut grads[a.0], gy.to_vec()),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], vec![gy[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], vec![gy[0] / n as f32; n]);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let c = 2.0 * gy[0] as f64 / av.len().max(1) as f64;
                let diff: Vec<f32> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| ((x as f64 - y as f64) * c) as f32)
                    .collect();
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], diff.iter().map(|d| -d).collect());
                }
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], diff);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f32],
        gy: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (nq, d) = (self.shape(q)[0], self.shape(q)[1]);
        let nk = self.shape(k)[0];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = to_f64(self.value(q).data());
        let kv = to_f64(self.value(k).data());
        let vv = to_f64(self.value(v).data());
        let g = to_f64(gy);
        let mut gq = vec![0.0f32; nq * d];
        let mut gk = vec![0.0f32; nk * d];
        let mut gv = vec![0.0f32; nk * d];
        for h in 0..heads {
            let off = h * dh;
            let p = to_f64(&probs[h * nq * nk..(h + 1) * nq * nk]);
            if self.rg(v) {
                // dV = Pᵀ · dO
                let dv = dgemm(nk, nq, dh, &p, 1, nk, &g[off..], d, 1);
                for r in 0..nk {
                    for c in 0..dh {
                        gv[r * d + off + c] = dv[r * dh + c] as f32;
                    }
                }
            }
            if !(self.rg(q) || self.rg(k)) {
                continue;
            }
            // dP = dO · Vᵀ
            let dp = dgemm(nq, dh, nk, &g[off..], d, 1, &vv[off..], 1, d);
            let mut ds = vec![0.0f64; nq * nk];
            for r in 0..nq {
                let row = r * nk..(r + 1) * nk;
                let dot: f64 = dp[row.clone()].iter().zip(&p[row.clone()]).map(|(a, b)| a * b).sum();
                for c in row {
                    ds[c] = p[c] * (dp[c] - dot) * scale;
                }
            }
            if self.rg(q) {
                let dq = dgemm(nq, nk, dh, &ds, nk, 1, &kv[off..], d, 1);
                for r in 0..nq {
                    for c in 0..dh {
                        gq[r * d + off + c] = dq[r * dh + c] as f32;
                    }
                }
            }
            if self.rg(k) {
                let dk = dgemm(nk, nq, dh, &ds, 1, nk, &qv[off..], d, 1);
                for r in 0..nk {
                    for c in 0..dh {
                        gk[r * d + off + c] = dk[r * dh + c] as f32;
                    }
                }
            }
        }
        if self.rg(q) {
            accumulate(&mut grads[q.0], gq);
        }
        if self.rg(k) {
            accumulate(&mut grads[k.0], gk);
        }
        if self.rg(v) {
            accumulate(&mut grads[v.0], gv);
        }
    }
}

/// Gradient of `loss` with respect to every trainable parameter bound in `graph`.
/// Frozen parameters are absent from the result.
pub fn reverse_gradient(graph: &Graph, loss: Var) -> Result<BTreeMap<String, Tensor>> {
    let grads = graph.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, &v) in graph.bound_params() {
        if !graph.rg(v) {
            continue;
        }
        let g = grads
            .get(v)
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()));
        out.insert(name.clone(), g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params_with(names: &[(&str, Tensor)]) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, t) in names {
            p.insert(*n, t.clone(), true);
        }
        p
    }

    #[test]
    fn quadratic_gradient() {
        let p = params_with(&[("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())]);
        let mut g = Graph::new();
        let w = g.param(&p, "w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = reverse_gradient(&g, loss).unwrap();
        assert_eq!(grads["w"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = params_with(&[("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())]);
        let mut g = Graph::new();
        let w = g.param(&p, "w").unwrap();
        let zero = g.scale(w, 0.0);
        let s = g.sum(zero);
        let five = g.constant(Tensor::scalar(5.0));
        let loss = g.add(s, five).unwrap();
        assert_eq!(g.value(loss).data(), &[5.0]);
        let grads = reverse_gradient(&g, loss).unwrap();
        assert_eq!(grads["w"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn frozen_params_are_absent() {
        let mut p = params_with(&[("a", Tensor::full(&[2], 1.0)), ("b", Tensor::full(&[2], 3.0))]);
        p.get_mut("b").unwrap().trainable = false;
        let mut g = Graph::new();
        let a = g.param(&p, "a").unwrap();
        let b = g.param(&p, "b").unwrap();
        let m = g.mul(a, b).unwrap();
        let loss = g.sum(m);
        let grads = reverse_gradient(&g, loss).unwrap();
        assert_eq!(grads["a"].data(), &[3.0, 3.0]);
        assert!(!grads.contains_key("b"));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::zeros(&[3]));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn nan_in_forward_rejected() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::new(vec![1], vec![f32::NAN]).unwrap());
        let s = g.sum(w);
        assert!(matches!(g.backward(s), Err(Error::NonFinite(_))));
    }

    fn mlp_loss(g: &mut Graph, p: &ParamSet) -> Result<Var> {
        let x = g.constant(Tensor::new(vec![3, 2], vec![0.3, -0.7, 1.1, 0.4, -0.2, 0.9]).unwrap());
        let w1 = g.param(p, "w1")?;
        let b1 = g.param(p, "b1")?;
        let w2 = g.param(p, "w2")?;
        let h = g.linear(x, w1, Some(b1))?;
        let h = g.gelu(h);
        let y = g.matmul(h, w2)?;
        let target =
            g.constant(Tensor::new(vec![3, 2], vec![0.5, -0.25, 0.1, 0.0, -0.4, 0.3]).unwrap());
        g.mse(y, target)
    }

    #[test]
    fn two_layer_mlp_matches_central_differences() {
        // ten parameters: w1 [2,2], b1 [2], w2 [2,2]
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = params_with(&[
            ("w1", Tensor::randn(&[2, 2], 0.8, &mut rng)),
            ("b1", Tensor::randn(&[2], 0.5, &mut rng)),
            ("w2", Tensor::randn(&[2, 2], 0.8, &mut rng)),
        ]);
        let mut g = Graph::new();
        let loss = mlp_loss(&mut g, &p).unwrap();
        let analytic = reverse_gradient(&g, loss).unwrap();
        let numeric = finite_difference_gradient(
            |ps| {
                let mut g = Graph::new();
                let l = mlp_loss(&mut g, ps)?;
                Ok(g.value(l).data()[0] as f64)
            },
            &p,
            1e-3,
        )
        .unwrap();
        for (name, a) in &analytic {
            let n = &numeric[name];
            for (x, y) in a.data().iter().zip(n.data()) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-4);
                assert!(rel < 1e-3, "{name}: {x} vs {y}");
            }
        }
    }
}
