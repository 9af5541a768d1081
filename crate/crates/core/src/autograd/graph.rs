//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already topologically sorted and backward is a single reverse sweep.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    IndexSelect(Var, Vec<usize>),
    Relu(Var),
    Gelu(Var),
    Dropout(Var, Vec<f64>),
    LayerNorm { src: Var, inv_std: Vec<f64> },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaf variables.
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// For every flat index of `out_shape`, the flat source index obtained by
/// walking the output with the given per-axis source strides.
fn strided_map(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut cur = 0usize;
    for _ in 0..total {
        map.push(cur);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            cur += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// `None` when `src` already has the output shape.
fn broadcast_map(src: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if src == out {
        return None;
    }
    let off = out.len() - src.len();
    let ss = strides(src);
    let mut eff = vec![0; out.len()];
    for i in 0..src.len() {
        if src[i] != 1 {
            eff[off + i] = ss[i];
        }
    }
    Some(strided_map(out, &eff))
}

fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    map.as_ref().map_or(i, |m| m[i])
}

/// `out[m x n] += a[m x k] * b[k x n]`
fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m x k] += g[m x n] * b[k x n]^T`
fn mm_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k x n] += a[m x k]^T * g[m x n]`
fn mm_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Splits a shape around `axis` into (outer, dim, inner) extents.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
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
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf created with [`Graph::variable`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Differentiable leaf whose gradient is readable through [`Graph::grad`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Differentiable leaf bound to a stored parameter; backward adds its
    /// gradient into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::shape(name, sa, sb))?;
        let ma = broadcast_map(sa, &out_shape);
        let mb = broadcast_map(sb, &out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = (0..numel(&out_shape))
            .map(|i| f(da[at(&ma, i)], db[at(&mb, i)]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&out_shape, data)?, op, rg))
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let out = Tensor::from_fn(v.shape(), |i| v.data()[i] * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Matrix product over the last two axes. `b` is either a 2-D matrix
    /// shared across all leading axes of `a`, or has exactly `a`'s leading
    /// axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::shape("matmul", &sa, &sb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut data = vec![0.0; numel(&out_shape)];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if sb.len() == 2 {
            let rows = numel(&sa) / k;
            mm(da, db, &mut data, rows, k, n);
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(err());
            }
            let batch = numel(&sa[..sa.len() - 2]);
            for bi in 0..batch {
                mm(
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[bi * k * n..(bi + 1) * k * n],
                    &mut data[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::MatMul(a, b), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&x| x >= sa.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape("permute", &sa, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| sa[x]).collect();
        let st = strides(&sa);
        let eff: Vec<usize> = axes.iter().map(|&x| st[x]).collect();
        let map = strided_map(&out_shape, &eff);
        let src = self.value(a).data();
        let data = map.iter().map(|&j| src[j]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Permute(a, axes.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(parts.first().ok_or_else(|| Error::shape("concat", &[], &[]))?.0)
            .map(|n| n.value.shape().to_vec())
            .unwrap_or_default();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = around(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Elements `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(Error::shape("slice", &sa, &[axis, start, len]));
        }
        let (outer, dim, inner) = around(&sa, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = sa;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Slice { src: a, axis, start }, rg))
    }

    /// Gathers rows (entries of axis 0).
    pub fn index_select(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() || rows.iter().any(|&r| r >= sa[0]) {
            return Err(Error::shape("index_select", &sa, rows));
        }
        let inner = numel(&sa[1..]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            data.extend_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = sa;
        out_shape[0] = rows.len();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::IndexSelect(a, rows.to_vec()), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a);
        let out = Tensor::from_fn(v.shape(), |i| f(v.data()[i]));
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// Inverted dropout: kept entries are divided by `keep_prob`. A
    /// keep-probability of 1 returns `a` unchanged and draws nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, keep_prob: f64, rng: &mut R) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "dropout keep-probability must be in (0, 1], got {keep_prob}"
            )));
        }
        if keep_prob == 1.0 {
            return Ok(a);
        }
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep_prob { 1.0 / keep_prob } else { 0.0 })
            .collect();
        let v = self.value(a);
        let out = Tensor::from_fn(v.shape(), |i| v.data()[i] * mask[i]);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Dropout(a, mask), rg))
    }

    /// Normalizes over the last axis to zero mean and unit variance, without
    /// an affine transform.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = *v.shape().last().ok_or_else(|| Error::shape("layer_norm", &[], &[]))?;
        if n == 0 {
            return Err(Error::shape("layer_norm", v.shape(), &[]));
        }
        let mut out = vec![0.0; v.len()];
        let mut inv_std = Vec::with_capacity(v.len() / n);
        for (row, orow) in v.data().chunks(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, x) in orow.iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(v.shape(), out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::LayerNorm { src: a, inv_std }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = v.shape().last().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::shape("softmax", v.shape(), &[]));
        }
        let mut out = vec![0.0; v.len()];
        for (row, orow) in v.data().chunks(n).zip(out.chunks_mut(n)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, x) in orow.iter_mut().zip(row) {
                *o = (x - mx).exp();
                s += *o;
            }
            orow.iter_mut().for_each(|o| *o /= s);
        }
        let out = Tensor::new(v.shape(), out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::shape("mean", v.shape(), &[]));
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    /// Sums out the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape();
        let n = *shape.last().ok_or_else(|| Error::shape("sum_last", &[], &[]))?;
        let out_shape = shape[..shape.len() - 1].to_vec();
        let data = if n == 0 {
            vec![0.0; numel(&out_shape)]
        } else {
            v.data().chunks(n).map(|c| c.iter().sum()).collect()
        };
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::SumLast(a), rg))
    }

    /// Mean squared error between two same-shaped nodes.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape("mse", self.shape(pred), self.shape(target)));
        }
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Leaf and parameter gradients of a scalar `loss`, without a store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.run_backward(loss, None)
    }

    /// Backward pass that also adds parameter gradients into `store`.
    /// Repeated calls accumulate.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.run_backward(loss, Some(store))
    }

    fn run_backward(&mut self, loss: Var, mut store: Option<&mut ParamStore>) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Leaf => {
                    let slot = self.nodes[i].grad.get_or_insert_with(|| vec![0.0; g.len()]);
                    slot.iter_mut().zip(&g).for_each(|(s, x)| *s += x);
                    continue;
                }
                Op::Param(id) => {
                    if let Some(store) = store.as_deref_mut() {
                        store.grad_mut(*id).iter_mut().zip(&g).for_each(|(s, x)| *s += x);
                    }
                    continue;
                }
                _ => {}
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ma = broadcast_map(self.shape(a), out_shape);
                let mb = broadcast_map(self.shape(b), out_shape);
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let kind = match node.op {
                    Op::Add(..) => 0,
                    Op::Sub(..) => 1,
                    _ => 2,
                };
                if let Some(ga) = self.acc(grads, a) {
                    for (k, gk) in g.iter().enumerate() {
                        ga[at(&ma, k)] += if kind == 2 { gk * vb[at(&mb, k)] } else { *gk };
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for (k, gk) in g.iter().enumerate() {
                        gb[at(&mb, k)] += match kind {
                            0 => *gk,
                            1 => -gk,
                            _ => gk * va[at(&ma, k)],
                        };
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(s, x)| *s += c * x);
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if sb.len() == 2 {
                    let rows = numel(sa) / k;
                    if let Some(ga) = self.acc(grads, a) {
                        mm_bt(g, vb, ga, rows, k, n);
                    }
                    if let Some(gb) = self.acc(grads, b) {
                        mm_at(va, g, gb, rows, k, n);
                    }
                } else {
                    let batch = numel(&sa[..sa.len() - 2]);
                    if let Some(ga) = self.acc(grads, a) {
                        for bi in 0..batch {
                            mm_bt(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &vb[bi * k * n..(bi + 1) * k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    if let Some(gb) = self.acc(grads, b) {
                        for bi in 0..batch {
                            mm_at(
                                &va[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Permute(a, axes) => {
                let st = strides(self.shape(*a));
                let eff: Vec<usize> = axes.iter().map(|&x| st[x]).collect();
                let map = strided_map(out_shape, &eff);
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, &j) in map.iter().enumerate() {
                        ga[j] += g[k];
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(s, x)| *s += x);
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = around(out_shape, *axis);
                let mut offset = 0;
                let out_chunk = out_shape[*axis] * inner;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if let Some(gp) = self.acc(grads, p) {
                        for o in 0..outer {
                            let src = &g[o * out_chunk + offset..o * out_chunk + offset + chunk];
                            gp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(s, x)| *s += x);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { src, axis, start } => {
                let (outer, dim, inner) = around(self.shape(*src), *axis);
                let len = out_shape[*axis];
                if let Some(gs) = self.acc(grads, *src) {
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        gs[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(s, x)| *s += x);
                    }
                }
            }
            Op::IndexSelect(a, rows) => {
                let inner = numel(&self.shape(*a)[1..]);
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, &r) in rows.iter().enumerate() {
                        ga[r * inner..(r + 1) * inner]
                            .iter_mut()
                            .zip(&g[k * inner..(k + 1) * inner])
                            .for_each(|(s, x)| *s += x);
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        if x[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] * gelu_grad(x[k]);
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] * mask[k];
                    }
                }
            }
            Op::LayerNorm { src, inv_std } => {
                let n = *out_shape.last().unwrap();
                let xhat = node.value.data();
                if let Some(gs) = self.acc(grads, *src) {
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gs[r * n + j] +=
                                is / n as f64 * (n as f64 * gr[j] - sum_g - xr[j] * sum_gx);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let n = *out_shape.last().unwrap();
                let y = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ga[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let c = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|s| *s += c);
                }
            }
            Op::SumLast(a) => {
                let n = *self.shape(*a).last().unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, s) in ga.iter_mut().enumerate() {
                        *s += g[k / n];
                    }
                }
            }
        }
    }
}
