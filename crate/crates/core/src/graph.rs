//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every primitive as a node whose inputs are earlier
//! nodes, so the node order is already topological. [`Graph::backward`]
//! walks the tape once in reverse, accumulating (never overwriting) gradients
//! into every node that requires them.
//!
//! Most ops treat their operands as matrices over the last axis; see
//! [`Tensor::dims2`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::tensor::{kernels, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Primitive kinds, used to select a backward rule for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    MulCol,
    Affine,
    Sigmoid,
    Relu,
    Silu,
    Ln,
    Clamp,
    SoftmaxRows,
    LayerNorm,
    Transpose,
    Reshape,
    ConcatCols,
    ResizeCols,
    RepeatCols,
    GatherRows,
    GatherElems,
    GroupTokens,
    TokenMix,
    Sum,
    DotConst,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Silu(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, normalized: Vec<f64>, rstd: Vec<f64> },
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ResizeCols(Var),
    RepeatCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherElems(Var, Vec<usize>),
    GroupTokens { aligned: Var, scores: Var, indices: Vec<usize>, groups: usize, k: usize, e: usize },
    TokenMix { input: Var, mats: Var, heads: usize, tokens: usize },
    Sum(Var),
    DotConst(Var, Vec<f64>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulCol(..) => OpKind::MulCol,
            Op::Affine(..) => OpKind::Affine,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::Silu(..) => OpKind::Silu,
            Op::Ln(..) => OpKind::Ln,
            Op::Clamp(..) => OpKind::Clamp,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ResizeCols(..) => OpKind::ResizeCols,
            Op::RepeatCols(..) => OpKind::RepeatCols,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::GatherElems(..) => OpKind::GatherElems,
            Op::GroupTokens { .. } => OpKind::GroupTokens,
            Op::TokenMix { .. } => OpKind::TokenMix,
            Op::Sum(..) => OpKind::Sum,
            Op::DotConst(..) => OpKind::DotConst,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// The tape. One graph per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    fault: Option<OpKind>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false, fault: None }
    }

    /// Corrupt the backward rule of one primitive kind (its input gradients
    /// are doubled). Only useful as a negative control for gradient checks.
    pub fn inject_backward_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn backward_done(&self) -> bool {
        self.backward_done
    }

    /// Clear all gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
                return Err(shape_err("matmul", av, bv));
            }
            av.matmul(bv)?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, n) = xv.dims2();
        if bv.len() != n {
            return Err(shape_err("add_row", xv, bv));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    /// `x[m×n] ⊙ w[m]` broadcast over columns (scales each row).
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (m, n) = xv.dims2();
        if wv.len() != m {
            return Err(shape_err("mul_col", xv, wv));
        }
        let mut data = xv.data().to_vec();
        for (row, &s) in data.chunks_mut(n).zip(wv.data()) {
            for o in row {
                *o *= s;
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::MulCol(x, w), rg))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| scale * v + shift).collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Affine(x, scale), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, silu, Op::Silu(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, libm::log, Op::Ln(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (_, c) = xv.dims2();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Standardize over the last axis (epsilon 1e-6), then apply `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, d) = xv.dims2();
        if gv.len() != d {
            return Err(shape_err("layer_norm", xv, gv));
        }
        if bv.len() != d {
            return Err(shape_err("layer_norm", xv, bv));
        }
        let mut normalized = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            rstd[r] = s;
            for j in 0..d {
                let n = (row[j] - mean) * s;
                normalized[r * d + j] = n;
                out[r * d + j] = n * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, normalized, rstd }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            bail!(Domain, "transpose needs a matrix, got shape {:?}", xv.shape());
        }
        let out = xv.transpose();
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Domain, "concat_cols of nothing");
        };
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(shape_err("concat_cols", self.value(first), pv));
            }
            widths.push(pv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(&[rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Keep the first `width` columns, zero-padding when `width` exceeds the input.
    pub fn resize_cols(&mut self, x: Var, width: usize) -> Result<Var> {
        if width == 0 {
            bail!(Domain, "resize_cols to zero width");
        }
        let xv = self.value(x);
        let (rows, cols) = xv.dims2();
        let mut data = vec![0.0; rows * width];
        let keep = cols.min(width);
        for r in 0..rows {
            data[r * width..r * width + keep].copy_from_slice(&xv.row(r)[..keep]);
        }
        let out = Tensor::new(&[rows, width], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ResizeCols(x), rg))
    }

    /// Repeat every column `times` times in place: `[a, b] → [a, a, b, b]`.
    pub fn repeat_cols(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            bail!(Domain, "repeat_cols zero times");
        }
        let xv = self.value(x);
        let (rows, cols) = xv.dims2();
        let mut data = Vec::with_capacity(rows * cols * times);
        for &v in xv.data() {
            data.extend(core::iter::repeat_n(v, times));
        }
        let out = Tensor::new(&[rows, cols * times], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::RepeatCols(x, times), rg))
    }

    /// Rows `indices` of `table`, in order (rows may repeat).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = tv.dims2();
        if indices.is_empty() {
            bail!(Domain, "gather_rows with no indices");
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                bail!(Domain, "gather_rows index {} out of range for {} rows", i, rows);
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(&[indices.len(), cols], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::GatherRows(table, indices.to_vec()), rg))
    }

    /// Flat elements `indices` of `x`, shaped as `shape`.
    pub fn gather_elems(&mut self, x: Var, indices: &[usize], shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= xv.len() {
                bail!(Domain, "gather_elems index {} out of range for {} elements", i, xv.len());
            }
            data.push(xv.data()[i]);
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GatherElems(x, indices.to_vec()), rg))
    }

    /// Build token rows from aligned features.
    ///
    /// `aligned` is `[batch × n_f·e]` (sample-major, features concatenated),
    /// `scores` is `[groups × k]` and `indices` holds `groups·k` feature ids.
    /// Row `b·groups + g` of the output is the concatenation over slots `j`
    /// of `scores[g, j] · x̂_{b, indices[g·k + j]}`, width `k·e`.
    pub fn group_tokens(&mut self, aligned: Var, scores: Var, indices: &[usize], e: usize) -> Result<Var> {
        let (av, sv) = (self.value(aligned), self.value(scores));
        let (batch, width) = av.dims2();
        let (groups, k) = sv.dims2();
        if e == 0 || width % e != 0 || indices.len() != groups * k {
            return Err(shape_err("group_tokens", av, sv));
        }
        let n_f = width / e;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_f) {
            bail!(Domain, "group_tokens feature index {} out of range for {} features", bad, n_f);
        }
        let d = k * e;
        let mut data = vec![0.0; batch * groups * d];
        for b in 0..batch {
            let src = av.row(b);
            for g in 0..groups {
                let dst = &mut data[(b * groups + g) * d..(b * groups + g + 1) * d];
                for j in 0..k {
                    let s = sv.data()[g * k + j];
                    let f = indices[g * k + j];
                    for c in 0..e {
                        dst[j * e + c] = s * src[f * e + c];
                    }
                }
            }
        }
        let out = Tensor::new(&[batch * groups, d], data)?;
        let rg = self.rg(&[aligned, scores]);
        Ok(self.push(out, Op::GroupTokens { aligned, scores, indices: indices.to_vec(), groups, k, e }, rg))
    }

    /// Head-wise token mixing with residual over token-major rows.
    ///
    /// `input` is `[batch·tokens × d]`; `mats` is `[heads·tokens × tokens]`
    /// holding `W_h` in row block `h`. Within each sample and head `h`
    /// (columns `h·d_h .. (h+1)·d_h`), the output is `(I + W_hᵀ) M^(h)`.
    pub fn token_mix(&mut self, input: Var, mats: Var, heads: usize, tokens: usize) -> Result<Var> {
        let (iv, wv) = (self.value(input), self.value(mats));
        let (rows, d) = iv.dims2();
        if heads == 0 || d % heads != 0 {
            bail!(Config, "token dimension {} is not divisible by {} heads", d, heads);
        }
        if tokens == 0 || rows % tokens != 0 || wv.shape() != [heads * tokens, tokens] {
            return Err(shape_err("token_mix", iv, wv));
        }
        let dh = d / heads;
        let mut data = iv.data().to_vec();
        let (x, w) = (iv.data(), wv.data());
        for b in 0..rows / tokens {
            for h in 0..heads {
                for t in 0..tokens {
                    let out_row = (b * tokens + t) * d + h * dh;
                    for s in 0..tokens {
                        let coef = w[(h * tokens + s) * tokens + t];
                        if coef == 0.0 {
                            continue;
                        }
                        let in_row = (b * tokens + s) * d + h * dh;
                        for c in 0..dh {
                            data[out_row + c] += coef * x[in_row + c];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(iv.shape(), data)?;
        let rg = self.rg(&[input, mats]);
        Ok(self.push(out, Op::TokenMix { input, mats, heads, tokens }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `Σ_i x_i · weights_i` with constant weights.
    pub fn dot_const(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            bail!(Domain, "dot_const: {} weights for {} elements", weights.len(), xv.len());
        }
        let s = xv.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::DotConst(x, weights), rg))
    }

    /// Populate gradients of every `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            bail!(State, "backward already ran on this graph; call reset_grads first");
        }
        if self.value(loss).len() != 1 {
            bail!(Domain, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let mut contributions = self.local_backward(idx, &g);
            if self.fault == Some(self.nodes[idx].op.kind()) {
                for (_, c) in &mut contributions {
                    for v in c.iter_mut() {
                        *v *= 2.0;
                    }
                }
            }
            for (input, c) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
            self.nodes[idx].grad = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn local_backward(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = av.dims2();
                let n = bv.cols();
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_bt(g, bv.data(), &mut da, m, k, n);
                    res.push((*a, da));
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_at(av.data(), g, &mut db, m, k, n);
                    res.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                res.push((*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                res.push((*b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
            }
            Op::AddRow(x, bias) => {
                let n = val(*bias).len();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                res.push((*x, g.to_vec()));
                res.push((*bias, gb));
            }
            Op::MulCol(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let n = xv.cols();
                let mut gx = g.to_vec();
                let mut gw = vec![0.0; wv.len()];
                for (r, (grow, xrow)) in gx.chunks_mut(n).zip(xv.data().chunks(n)).enumerate() {
                    let s = wv.data()[r];
                    let mut acc = 0.0;
                    for (gv, xv) in grow.iter_mut().zip(xrow) {
                        acc += *gv * xv;
                        *gv *= s;
                    }
                    gw[r] = acc;
                }
                res.push((*x, gx));
                res.push((*w, gw));
            }
            Op::Affine(x, scale) => res.push((*x, g.iter().map(|v| v * scale).collect())),
            Op::Sigmoid(x) => res.push((*x, g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect())),
            Op::Relu(x) => res.push((*x, g.iter().zip(val(*x).data()).map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 }).collect())),
            Op::Silu(x) => res.push((
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(gv, &v)| {
                        let s = sigmoid(v);
                        gv * s * (1.0 + v * (1.0 - s))
                    })
                    .collect(),
            )),
            Op::Ln(x) => res.push((*x, g.iter().zip(val(*x).data()).map(|(gv, v)| gv / v).collect())),
            Op::Clamp(x, lo, hi) => res.push((*x, g.iter().zip(val(*x).data()).map(|(gv, &v)| if v > *lo && v < *hi { *gv } else { 0.0 }).collect())),
            Op::SoftmaxRows(x) => {
                let c = node.value.cols();
                let mut gx = vec![0.0; g.len()];
                for ((grow, yrow), orow) in g.chunks(c).zip(out.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        orow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                res.push((*x, gx));
            }
            Op::LayerNorm { x, gain, bias, normalized, rstd } => {
                let gv = val(*gain).data();
                let d = gv.len();
                let mut gx = vec![0.0; g.len()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for r in 0..g.len() / d {
                    let grow = &g[r * d..(r + 1) * d];
                    let nrow = &normalized[r * d..(r + 1) * d];
                    let mut mean_g = 0.0;
                    let mut mean_gn = 0.0;
                    for j in 0..d {
                        ggain[j] += grow[j] * nrow[j];
                        gbias[j] += grow[j];
                        let gn = grow[j] * gv[j];
                        mean_g += gn;
                        mean_gn += gn * nrow[j];
                    }
                    mean_g /= d as f64;
                    mean_gn /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = rstd[r] * (grow[j] * gv[j] - mean_g - nrow[j] * mean_gn);
                    }
                }
                res.push((*x, gx));
                res.push((*gain, ggain));
                res.push((*bias, gbias));
            }
            Op::Transpose(x) => {
                let (r, c) = node.value.dims2();
                let mut gx = vec![0.0; g.len()];
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] = g[i * c + j];
                    }
                }
                res.push((*x, gx));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    res.push((p, gp));
                }
            }
            Op::ResizeCols(x) => {
                let (rows, cols) = val(*x).dims2();
                let width = node.value.cols();
                let keep = cols.min(width);
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols..r * cols + keep].copy_from_slice(&g[r * width..r * width + keep]);
                }
                res.push((*x, gx));
            }
            Op::RepeatCols(x, times) => {
                let gx = g.chunks(*times).map(|c| c.iter().sum()).collect();
                res.push((*x, gx));
            }
            Op::GatherRows(table, indices) => {
                let tv = val(*table);
                let cols = tv.cols();
                let mut gt = vec![0.0; tv.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        gt[i * cols + c] += g[r * cols + c];
                    }
                }
                res.push((*table, gt));
            }
            Op::GatherElems(x, indices) => {
                let mut gx = vec![0.0; val(*x).len()];
                for (gv, &i) in g.iter().zip(indices) {
                    gx[i] += gv;
                }
                res.push((*x, gx));
            }
            Op::GroupTokens { aligned, scores, indices, groups, k, e } => {
                let (av, sv) = (val(*aligned), val(*scores));
                let (batch, width) = av.dims2();
                let d = k * e;
                let mut ga = vec![0.0; av.len()];
                let mut gs = vec![0.0; sv.len()];
                for b in 0..batch {
                    for gi in 0..*groups {
                        let grow = &g[(b * groups + gi) * d..(b * groups + gi + 1) * d];
                        for j in 0..*k {
                            let slot = gi * k + j;
                            let s = sv.data()[slot];
                            let f = indices[slot];
                            let mut acc = 0.0;
                            for c in 0..*e {
                                let gv = grow[j * e + c];
                                acc += gv * av.data()[b * width + f * e + c];
                                ga[b * width + f * e + c] += gv * s;
                            }
                            gs[slot] += acc;
                        }
                    }
                }
                res.push((*aligned, ga));
                res.push((*scores, gs));
            }
            Op::TokenMix { input, mats, heads, tokens } => {
                let (iv, wv) = (val(*input), val(*mats));
                let (rows, d) = iv.dims2();
                let dh = d / heads;
                let (x, w) = (iv.data(), wv.data());
                let mut gx = g.to_vec();
                let mut gw = vec![0.0; wv.len()];
                for b in 0..rows / tokens {
                    for h in 0..*heads {
                        for t in 0..*tokens {
                            let out_row = (b * tokens + t) * d + h * dh;
                            for s in 0..*tokens {
                                let widx = (h * tokens + s) * tokens + t;
                                let coef = w[widx];
                                let in_row = (b * tokens + s) * d + h * dh;
                                let mut acc = 0.0;
                                for c in 0..dh {
                                    let gv = g[out_row + c];
                                    acc += gv * x[in_row + c];
                                    gx[in_row + c] += coef * gv;
                                }
                                gw[widx] += acc;
                            }
                        }
                    }
                }
                res.push((*input, gx));
                res.push((*mats, gw));
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; val(*x).len()])),
            Op::DotConst(x, weights) => res.push((*x, weights.iter().map(|w| w * g[0]).collect())),
        }
        res.retain(|(v, _)| needs(*v));
        res
    }

    /// First node whose value holds a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<(usize, OpKind)> {
        self.nodes.iter().enumerate().find(|(_, n)| !n.value.all_finite()).map(|(i, n)| (i, n.op.kind()))
    }

    pub fn describe(&self, v: Var) -> alloc::string::String {
        format!("node {} ({:?}, shape {:?})", v.0, self.nodes[v.0].op.kind(), self.shape(v))
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_graph_fn, Tolerance};
    use crate::rng::SeededRng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let a = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let b = g.constant(t(&[2, 1], &[0.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, [2, 3]);
                assert_eq!(right, [2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn sigmoid_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[0.0, -800.0, -20.0]));
        let y = g.sigmoid(x);
        let v = g.value(y).data().to_vec();
        assert_eq!(v[0], 0.5);
        assert!(v[1] >= 0.0 && v[1] < 1e-6 && v[1].is_finite());
        assert!(v[2] > 0.0 && v[2] < 1e-6);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap()[0], 0.25);
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = g.softmax_rows(x);
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = g.constant(t(&[1, 3], &[1.0, 1.5, 2.0]));
        let b = g.constant(t(&[1, 3], &[101.0, 101.5, 102.0]));
        let (ya, yb) = (g.softmax_rows(a), g.softmax_rows(b));
        assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_and_mean() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[3.0; 4]));
        let gain = g.constant(Tensor::full(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));

        let mut rng = SeededRng::new(1);
        let x = g.constant(Tensor::randn(&[5, 6], 2.0, &mut rng));
        let bias_t = Tensor::randn(&[6], 1.0, &mut rng);
        let bias_mean = bias_t.data().iter().sum::<f64>() / 6.0;
        let gain = g.constant(Tensor::full(&[6], 1.0));
        let bias = g.constant(bias_t);
        let y = g.layer_norm(x, gain, bias).unwrap();
        for r in 0..5 {
            let m = g.value(y).row(r).iter().sum::<f64>() / 6.0;
            assert!((m - bias_mean).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_guards() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Domain(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
        g.reset_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let tol = Tolerance::default();
        for seed in 0..20 {
            let mut rng = SeededRng::new(100 + seed);
            let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
            let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let gain = Tensor::randn(&[4], 1.0, &mut rng);
            let bias = Tensor::randn(&[4], 1.0, &mut rng);
            let col = Tensor::randn(&[3], 1.0, &mut rng);
            let mats = Tensor::randn(&[2 * 3, 3], 1.0, &mut rng);
            let scores = Tensor::randn(&[2, 2], 1.0, &mut rng);
            let params = [a, b, w, gain, bias, col, mats, scores];
            let report = check_graph_fn(
                &params,
                |g, v| {
                    let (a, b, w, gain, bias, col, mats, scores) = (v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]);
                    let ab = g.matmul(a, b)?;
                    let sig = g.sigmoid(ab);
                    let aw = g.mul(a, w)?;
                    let ln = g.layer_norm(aw, gain, bias)?;
                    let sm = g.softmax_rows(ln);
                    let si = g.silu(sm);
                    let mc = g.mul_col(si, col)?;
                    let ar = g.add_row(mc, bias)?;
                    let mix = g.token_mix(ar, mats, 2, 3)?;
                    let tr = g.transpose(mix)?;
                    let sig2 = g.repeat_cols(sig, 2)?;
                    let cat = g.concat_cols(&[mix, sig2])?;
                    let rs = g.resize_cols(cat, 5)?;
                    let gr = g.gather_rows(rs, &[2, 0, 2])?;
                    let sc = g.softmax_rows(scores);
                    let tok = g.group_tokens(gr, sc, &[4, 1, 0, 4], 1)?;
                    let sq = g.mul(tok, tok)?;
                    let pos = g.affine(sq, 1.0, 0.5);
                    let lg = g.ln(pos);
                    let cl = g.clamp(lg, -10.0, 10.0);
                    let ge = g.gather_elems(tr, &[0, 5, 11], &[3])?;
                    let ge2 = g.gather_elems(a, &[1, 4, 7], &[3])?;
                    let df = g.sub(ge, ge2)?;
                    let rl = g.relu(df);
                    let dc = g.dot_const(rl, alloc::vec![1.0, -2.0, 3.0])?;
                    let total = g.sum(cl);
                    let rs2 = g.reshape(total, &[1])?;
                    g.add(rs2, dc)
                },
                1e-5,
                tol,
            )
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }
}
