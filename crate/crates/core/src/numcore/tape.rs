//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] records every operation in execution order. Because an
//! operation can only consume values that already exist, the recording order
//! is a topological order and [`Tape::backward`] simply walks it in reverse:
//! by the time a node is visited all of its consumers have already pushed
//! their contribution into its gradient accumulator.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numcore::tensor::{gemm, matmul_plan, Tensor};

/// Floor applied inside [`Tape::log`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Floor on `sin θ` when differentiating the angular margin.
const SIN_FLOOR: f64 = 1e-6;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powi(Var, i32),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    SumAxis(Var, usize),
    VarAxis(Var, usize),
    Matmul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    SwapAxes12(Var),
    Reshape(Var),
    Softmax(Var, usize),
    LogSoftmax(Var),
    MaskedFill(Var, Arc<Vec<bool>>),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    L2NormalizeLast(Var, f64),
    L2Norm(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    SelectRows(Var, Arc<Vec<usize>>),
    SumPoolLast(Var, usize),
    Grl(Var, f64),
    MarginCos(Var, f64),
    GaussianLogits { mu: Var, var: Var, grid: Arc<Vec<f64>>, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `x` cut off from the gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(self.value(b).len())
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s and repeats.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.broadcast_check("add_broadcast", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &x) in chunk.iter_mut().zip(bv) {
                *o += x;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    /// `a ⊙ b` where `b`'s shape is a trailing suffix of `a`'s and repeats.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.broadcast_check("mul_broadcast", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &x) in chunk.iter_mut().zip(bv) {
                *o *= x;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MulBroadcast(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn powi(&mut self, x: Var, p: i32) -> Var {
        self.unary(x, Op::Powi(x, p), |v| v.powi(p))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Natural log of `max(x, 1e-12)`; the gradient is zero below the floor.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.max(LOG_FLOOR).ln())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        s
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = xv.axis_split(axis)?;
        let mut out = vec![0.0; outer * inner];
        let d = xv.data();
        for o in 0..outer {
            for j in 0..len {
                let src = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (acc, &v) in dst.iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let value = Tensor::from_parts(Self::reduced_shape(xv.shape(), axis), out);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = self.value(x).axis_split(axis)?.1;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Population variance along `axis`.
    pub fn var_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = xv.axis_split(axis)?;
        let d = xv.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| d[(o * len + j) * inner + i];
                let mean = (0..len).map(at).sum::<f64>() / len as f64;
                out[o * inner + i] =
                    (0..len).map(|j| (at(j) - mean).powi(2)).sum::<f64>() / len as f64;
            }
        }
        let value = Tensor::from_parts(Self::reduced_shape(xv.shape(), axis), out);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::VarAxis(x, axis), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Matmul { a, b, trans_b: false }, rg))
    }

    /// `a · bᵀ` (transpose over the last two axes of `b`).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Matmul { a, b, trans_b: true }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    /// `[a, b, c, d] → [a, c, b, d]`; used to split and merge attention heads.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::contract(format!(
                "swap_axes12 needs rank 4, got {:?}",
                xv.shape()
            )));
        }
        let s = xv.shape();
        let value = Tensor::from_parts(vec![s[0], s[2], s[1], s[3]], swap12(xv.data(), s));
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SwapAxes12(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).softmax(axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x, axis), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Replaces entries where `keep` is false with `fill`; those entries get
    /// no gradient.
    pub fn masked_fill(&mut self, x: Var, keep: Arc<Vec<bool>>, fill: f64) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.len() {
            return Err(Error::shape("masked_fill", xv.shape(), &[keep.len()]));
        }
        let data = xv
            .data()
            .iter()
            .zip(keep.iter())
            .map(|(&v, &k)| if k { v } else { fill })
            .collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaskedFill(x, keep), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let (mean, rstd) = row_moments(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + b[j];
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, eps }, rg))
    }

    /// Divides each last-axis row by `max(‖row‖₂, floor)`. A zero row maps to
    /// zero.
    pub fn l2_normalize_last(&mut self, x: Var, floor: f64) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(floor);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(value, Op::L2NormalizeLast(x, floor), rg)
    }

    /// Euclidean norm of all elements; the subgradient at zero is zero.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(n), Op::L2Norm(x), rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("concat of nothing"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::contract(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut data = Vec::with_capacity(outer * total * base[axis + 1..].iter().product::<usize>());
        for o in 0..outer {
            for &x in xs {
                let xv = self.value(x);
                let chunk = xv.len() / outer;
                data.extend_from_slice(&xv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(xs.to_vec(), axis), rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, full, inner) = xv.axis_split(axis)?;
        if len == 0 || start + len > full {
            return Err(Error::contract(format!(
                "slice {start}..{} out of range for axis {axis} of {:?}",
                start + len,
                xv.shape()
            )));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&xv.data()[from..from + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { x, axis, start }, rg))
    }

    /// Gathers last-axis rows of `x` (viewed as `[rows, cols]`) into a
    /// `[indices.len(), cols]` matrix.
    pub fn select_rows(&mut self, x: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if indices.is_empty() || indices.iter().any(|&i| i >= r) {
            return Err(Error::contract(format!(
                "select_rows: indices out of range for {r} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices.iter() {
            data.extend_from_slice(xv.row(i));
        }
        let value = Tensor::from_parts(vec![indices.len(), c], data);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SelectRows(x, indices), rg))
    }

    /// Non-overlapping sum-pool of window `k` along the last axis.
    pub fn sum_pool_last(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if k == 0 || c % k != 0 {
            return Err(Error::config(format!(
                "sum-pool window {k} does not divide width {c}"
            )));
        }
        let data = xv.data().chunks(k).map(|w| w.iter().sum()).collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = c / k;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SumPoolLast(x, k), rg))
    }

    /// Gradient reversal: identity forward, upstream gradient times `-lambda`
    /// backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.value(x).clone();
        let rg = self.rg(&[x]);
        self.push(value, Op::Grl(x, lambda), rg)
    }

    /// `cos(arccos(clamp(c, -1, 1)) + tau)` elementwise.
    pub fn margin_cos(&mut self, x: Var, tau: f64) -> Var {
        self.unary(x, Op::MarginCos(x, tau), |c| {
            (c.clamp(-1.0, 1.0).acos() + tau).cos()
        })
    }

    /// Log-densities (up to a constant) of per-entry Gaussians on a fixed grid:
    /// `out[.., j] = -(grid[j] - mu)² / (2 (var + eps))`, with shape
    /// `mu.shape ++ [grid.len()]`.
    pub fn gaussian_logits(
        &mut self,
        mu: Var,
        var: Var,
        grid: Arc<Vec<f64>>,
        eps: f64,
    ) -> Result<Var> {
        let (m, v) = (self.value(mu), self.value(var));
        if m.shape() != v.shape() {
            return Err(Error::shape("gaussian_logits", m.shape(), v.shape()));
        }
        let mut data = Vec::with_capacity(m.len() * grid.len());
        for (&mu_i, &var_i) in m.data().iter().zip(v.data()) {
            let denom = 2.0 * (var_i + eps);
            data.extend(grid.iter().map(|&g| -(g - mu_i).powi(2) / denom));
        }
        let mut shape = m.shape().to_vec();
        shape.push(grid.len());
        let rg = self.rg(&[mu, var]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::GaussianLogits { mu, var, grid, eps },
            rg,
        ))
    }

    // ---- composites ----

    /// `x · w + b` with `w: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    /// Dropout with a precomputed keep mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, scaled_mask: Tensor) -> Result<Var> {
        let m = self.constant(scaled_mask);
        self.mul(x, m)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let ga = g.data();
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].requires_grad {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        };
        let shaped = |v: Var, data: Vec<f64>| Tensor::from_parts(self.shape(v).to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                send(*a, g.mul(self.value(*b)).unwrap());
                send(*b, g.mul(self.value(*a)).unwrap());
            }
            Op::AddBroadcast(a, b) => {
                send(*a, g.clone());
                if self.requires_grad(*b) {
                    let n = self.value(*b).len();
                    let mut acc = vec![0.0; n];
                    for chunk in ga.chunks(n) {
                        for (s, &v) in acc.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    send(*b, shaped(*b, acc));
                }
            }
            Op::MulBroadcast(a, b) => {
                let bv = self.value(*b).data();
                let n = bv.len();
                if self.requires_grad(*a) {
                    let mut da = ga.to_vec();
                    for chunk in da.chunks_mut(n) {
                        for (d, &x) in chunk.iter_mut().zip(bv) {
                            *d *= x;
                        }
                    }
                    send(*a, shaped(*a, da));
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    let mut acc = vec![0.0; n];
                    for (gc, ac) in ga.chunks(n).zip(av.chunks(n)) {
                        for j in 0..n {
                            acc[j] += gc[j] * ac[j];
                        }
                    }
                    send(*b, shaped(*b, acc));
                }
            }
            Op::Scale(x, s) => send(*x, g.scale(*s)),
            Op::AddScalar(x) => send(*x, g.clone()),
            Op::Powi(x, p) => {
                let p = *p;
                let d = g
                    .zip_map(self.value(*x), |gv, xv| gv * p as f64 * xv.powi(p - 1))
                    .unwrap();
                send(*x, d);
            }
            Op::Exp(x) => send(*x, g.mul(out).unwrap()),
            Op::Log(x) => {
                let d = g
                    .zip_map(self.value(*x), |gv, xv| {
                        if xv > LOG_FLOOR {
                            gv / xv
                        } else {
                            0.0
                        }
                    })
                    .unwrap();
                send(*x, d);
            }
            Op::Relu(x) => {
                let d = g
                    .zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                    .unwrap();
                send(*x, d);
            }
            Op::Gelu(x) => {
                let d = g
                    .zip_map(self.value(*x), |gv, xv| gv * gelu_grad(xv))
                    .unwrap();
                send(*x, d);
            }
            Op::Sigmoid(x) => send(*x, g.zip_map(out, |gv, y| gv * y * (1.0 - y)).unwrap()),
            Op::Tanh(x) => send(*x, g.zip_map(out, |gv, y| gv * (1.0 - y * y)).unwrap()),
            Op::Sum(x) => {
                let s = ga[0];
                send(*x, Tensor::full(self.shape(*x).to_vec(), s));
            }
            Op::SumAxis(x, axis) => {
                let (outer, len, inner) = self.value(*x).axis_split(*axis).unwrap();
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        d[(o * len + j) * inner..(o * len + j + 1) * inner]
                            .copy_from_slice(&ga[o * inner..(o + 1) * inner]);
                    }
                }
                send(*x, shaped(*x, d));
            }
            Op::VarAxis(x, axis) => {
                let xv = self.value(*x);
                let (outer, len, inner) = xv.axis_split(*axis).unwrap();
                let xd = xv.data();
                let mut d = vec![0.0; xd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let pos = |j: usize| (o * len + j) * inner + i;
                        let mean = (0..len).map(|j| xd[pos(j)]).sum::<f64>() / len as f64;
                        let gv = ga[o * inner + i];
                        for j in 0..len {
                            d[pos(j)] = gv * 2.0 * (xd[pos(j)] - mean) / len as f64;
                        }
                    }
                }
                send(*x, shaped(*x, d));
            }
            Op::Matmul { a, b, trans_b } => {
                self.matmul_backward(*a, *b, *trans_b, g, &mut send);
            }
            Op::Transpose(x) => send(*x, g.transpose().unwrap()),
            Op::SwapAxes12(x) => {
                let s = g.shape();
                send(*x, shaped(*x, swap12(ga, s)));
            }
            Op::Reshape(x) => send(*x, shaped(*x, ga.to_vec())),
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = out.axis_split(*axis).unwrap();
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let pos = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| ga[pos(j)] * y[pos(j)]).sum();
                        for j in 0..len {
                            d[pos(j)] = y[pos(j)] * (ga[pos(j)] - dot);
                        }
                    }
                }
                send(*x, shaped(*x, d));
            }
            Op::LogSoftmax(x) => {
                let c = out.cols();
                let mut d = ga.to_vec();
                for (drow, yrow) in d.chunks_mut(c).zip(out.data().chunks(c)) {
                    let gs: f64 = drow.iter().sum();
                    for (dv, &y) in drow.iter_mut().zip(yrow) {
                        *dv -= y.exp() * gs;
                    }
                }
                send(*x, shaped(*x, d));
            }
            Op::MaskedFill(x, keep) => {
                let d = ga
                    .iter()
                    .zip(keep.iter())
                    .map(|(&gv, &k)| if k { gv } else { 0.0 })
                    .collect();
                send(*x, shaped(*x, d));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for ((xrow, grow), drow) in xv
                    .data()
                    .chunks(c)
                    .zip(ga.chunks(c))
                    .zip(dx.chunks_mut(c))
                {
                    let (mean, rstd) = row_moments(xrow, *eps);
                    let mut sum_gg = 0.0;
                    let mut sum_ggx = 0.0;
                    for j in 0..c {
                        let xhat = (xrow[j] - mean) * rstd;
                        dg[j] += grow[j] * xhat;
                        db[j] += grow[j];
                        let gg = grow[j] * gam[j];
                        sum_gg += gg;
                        sum_ggx += gg * xhat;
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        let xhat = (xrow[j] - mean) * rstd;
                        let gg = grow[j] * gam[j];
                        drow[j] = rstd / cf * (cf * gg - sum_gg - xhat * sum_ggx);
                    }
                }
                send(*x, shaped(*x, dx));
                send(*gamma, shaped(*gamma, dg));
                send(*beta, shaped(*beta, db));
            }
            Op::L2NormalizeLast(x, floor) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for ((xrow, grow), (drow, yrow)) in xv
                    .data()
                    .chunks(c)
                    .zip(ga.chunks(c))
                    .zip(d.chunks_mut(c).zip(out.data().chunks(c)))
                {
                    let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > *floor {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            drow[j] = (grow[j] - yrow[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..c {
                            drow[j] = grow[j] / floor;
                        }
                    }
                }
                send(*x, shaped(*x, d));
            }
            Op::L2Norm(x) => {
                let n = out.item();
                let gv = ga[0];
                let d = if n > 0.0 {
                    self.value(*x).map(|v| gv * v / n)
                } else {
                    Tensor::zeros(self.shape(*x).to_vec())
                };
                send(*x, d);
            }
            Op::Concat(xs, axis) => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let out_chunk = out.len() / outer;
                let mut offset = 0;
                for &x in xs {
                    let xl = self.value(x).len() / outer;
                    if self.requires_grad(x) {
                        let mut d = Vec::with_capacity(xl * outer);
                        for o in 0..outer {
                            let from = o * out_chunk + offset;
                            d.extend_from_slice(&ga[from..from + xl]);
                        }
                        send(x, shaped(x, d));
                    }
                    offset += xl;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = self.value(*x).axis_split(*axis).unwrap();
                let len = out.shape()[*axis];
                let mut d = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let to = (o * full + start) * inner;
                    let from = o * len * inner;
                    d[to..to + len * inner].copy_from_slice(&ga[from..from + len * inner]);
                }
                send(*x, shaped(*x, d));
            }
            Op::SelectRows(x, indices) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += ga[k * c + j];
                    }
                }
                send(*x, shaped(*x, d));
            }
            Op::SumPoolLast(x, k) => {
                let d = ga.iter().flat_map(|&v| std::iter::repeat_n(v, *k)).collect();
                send(*x, shaped(*x, d));
            }
            Op::Grl(x, lambda) => send(*x, g.scale(-lambda)),
            Op::MarginCos(x, tau) => {
                let (ct, st) = (tau.cos(), tau.sin());
                let d = g
                    .zip_map(self.value(*x), |gv, c| {
                        if c.abs() > 1.0 {
                            return 0.0;
                        }
                        let sin_theta = (1.0 - c * c).max(0.0).sqrt().max(SIN_FLOOR);
                        gv * (ct + c * st / sin_theta)
                    })
                    .unwrap();
                send(*x, d);
            }
            Op::GaussianLogits { mu, var, grid, eps } => {
                let (m, v) = (self.value(*mu).data(), self.value(*var).data());
                let j = grid.len();
                let mut dm = vec![0.0; m.len()];
                let mut dv = vec![0.0; m.len()];
                for i in 0..m.len() {
                    let s = v[i] + eps;
                    for (jj, &gp) in grid.iter().enumerate() {
                        let gvv = ga[i * j + jj];
                        let diff = gp - m[i];
                        dm[i] += gvv * diff / s;
                        dv[i] += gvv * diff * diff / (2.0 * s * s);
                    }
                }
                send(*mu, shaped(*mu, dm));
                send(*var, shaped(*var, dv));
            }
        }
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        trans_b: bool,
        g: &Tensor,
        send: &mut impl FnMut(Var, Tensor),
    ) {
        let (av, bv) = (self.value(a), self.value(b));
        let plan = matmul_plan(av.shape(), bv.shape(), trans_b).expect("planned at forward");
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let gd = g.data();
        if self.requires_grad(a) {
            // dA = dC · op(B)ᵀ
            let mut da = vec![0.0; av.len()];
            for bi in 0..plan.batch {
                let b_off = if plan.shared_rhs { 0 } else { bi * k * n };
                gemm(
                    m,
                    n,
                    k,
                    &gd[bi * m * n..(bi + 1) * m * n],
                    false,
                    &bv.data()[b_off..b_off + k * n],
                    !trans_b,
                    &mut da[bi * m * k..(bi + 1) * m * k],
                    false,
                );
            }
            send(a, Tensor::from_parts(av.shape().to_vec(), da));
        }
        if self.requires_grad(b) {
            // d op(B) = Aᵀ · dC ; if B is stored transposed, dB = dCᵀ · A.
            let mut db = vec![0.0; bv.len()];
            for bi in 0..plan.batch {
                let b_off = if plan.shared_rhs { 0 } else { bi * k * n };
                let a_blk = &av.data()[bi * m * k..(bi + 1) * m * k];
                let g_blk = &gd[bi * m * n..(bi + 1) * m * n];
                let dst = &mut db[b_off..b_off + k * n];
                if trans_b {
                    gemm(n, m, k, g_blk, true, a_blk, false, dst, plan.shared_rhs);
                } else {
                    gemm(k, m, n, a_blk, true, g_blk, false, dst, plan.shared_rhs);
                }
            }
            send(b, Tensor::from_parts(bv.shape().to_vec(), db));
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn swap12(data: &[f64], s: &[usize]) -> Vec<f64> {
    let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0; data.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&data[src..src + d]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::new([2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones([2, 3]));
    }

    #[test]
    fn square_gives_two_x() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(1.75));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 3.5);
    }

    #[test]
    fn reuse_accumulates() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(0.3));
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.var(Tensor::scalar(3.0));
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn grl_forward_identity_backward_scaled() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![0.1, -7.25, 3.0]));
        let r = tape.grl(x, 0.5);
        assert_eq!(tape.value(r), tape.value(x));
        let w = tape.constant(Tensor::vector(vec![1.0, 2.0, -4.0]));
        let y = tape.mul(r, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-0.5, -1.0, 2.0]);
    }

    #[test]
    fn log_floor_saturates() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![0.0, 1.0]));
        let l = tape.log(x);
        assert_eq!(tape.value(l).data()[0], LOG_FLOOR.ln());
        let s = tape.sum(l);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn zero_row_normalizes_to_zero() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::new([2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let y = tape.l2_normalize_last(x, 1e-12);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.6, 0.8]);
    }

    #[test]
    fn margin_cos_is_finite_at_exact_alignment() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, -1.0, 1.0 + 1e-15]));
        let y = tape.margin_cos(x, 0.35);
        assert!(tape.value(y).is_finite());
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().is_finite());
    }

    #[test]
    fn sum_pool_rejects_indivisible_window() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::zeros([2, 6]));
        assert!(matches!(tape.sum_pool_last(x, 4), Err(Error::Config(_))));
        let p = tape.sum_pool_last(x, 3).unwrap();
        assert_eq!(tape.shape(p), &[2, 2]);
    }
}
