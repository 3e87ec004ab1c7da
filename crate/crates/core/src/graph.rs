//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Graph`]; node order is a valid
//! topological order, so [`Graph::backward`] is a single reverse sweep. A graph
//! lives for one forward/backward iteration and is then dropped.

use crate::kernels::{
    self, broadcast_shape, broadcast_strides, col2im, for_each_broadcast, gemm, im2col, reduce_to_shape, ConvGeom,
    Layout,
};
use crate::tensor::{numel, Tensor, TensorError, TensorResult};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Exp,
    Ln,
    Sigmoid,
    Tanh,
    Sin,
    Cos,
    /// Huber loss with unit transition point.
    SmoothL1,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Gelu => kernels::gelu(x),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sigmoid => kernels::sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::SmoothL1 => {
                if x.abs() < 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            }
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Gelu => kernels::gelu_grad(x),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::SmoothL1 => {
                if x.abs() < 1.0 {
                    x
                } else {
                    x.signum()
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Var, Var, Binary),
    AddScalar(Var),
    MulScalar(Var, f64),
    Unary(Var, Unary),
    Clip(Var, f64, f64),
    BceWithLogits(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        src: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Sum(Var),
    SumAxis(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AvgPool2d(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, extent, inner)` split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records gradients; used for evaluation.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
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
            requires_grad: requires_grad && self.grad_enabled,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Binds `t`; it is trainable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
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

    /// Gradient of the last [`backward`](Self::backward) loss w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adds the gradient of `v` (if any) into `target`'s stored gradient.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) {
        if let Some(g) = self.grad(v) {
            target.accumulate_grad(g);
        }
    }

    // ----- elementwise -----

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> TensorResult<Var> {
        let op_name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(op_name, ta.shape(), tb.shape())?;
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let (da, db) = (ta.data(), tb.data());
            let mut out = vec![0.0; numel(&out_shape)];
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(da[i], db[j]));
            out
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Binary(a, b, kind), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary(a, b, Binary::Div)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("shape preserved")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::MulScalar(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let out = self.map(a, |x| kind.apply(x));
        let rg = self.rg(a);
        self.push(out, Op::Unary(a, kind), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }

    pub fn smooth_l1(&mut self, a: Var) -> Var {
        self.unary(a, Unary::SmoothL1)
    }

    /// Clamp to `[lo, hi]`; the gradient passes only where `lo <= x <= hi`.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.map(a, |x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(out, Op::Clip(a, lo, hi), rg)
    }

    /// Elementwise binary cross-entropy on logits. `targets` is treated as constant.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> TensorResult<Var> {
        let (tx, tt) = (self.value(logits), self.value(targets));
        if tx.shape() != tt.shape() {
            return Err(TensorError::mismatch("bce_with_logits", tx.shape(), tt.shape()));
        }
        let data = tx
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(logits);
        Ok(self.push(out, Op::BceWithLogits(logits, targets), rg))
    }

    // ----- linear algebra & layout -----

    /// Batched matrix product. `a: (..., m, k)`; `b` is either `(k, n)`, shared
    /// across the batch, or `(..., k, n)` with the same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_rhs = sb.len() == 2;
        if k != kb || (!shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(TensorError::mismatch("matmul", &sa, &sb));
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        if shared_rhs {
            gemm(
                batch * m,
                k,
                n,
                1.0,
                da,
                Layout::rows(k),
                db,
                Layout::rows(n),
                0.0,
                &mut out,
            );
        } else {
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    &da[bi * m * k..],
                    Layout::rows(k),
                    &db[bi * k * n..],
                    Layout::rows(n),
                    0.0,
                    &mut out[bi * m * n..],
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        ))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> TensorResult<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let data = kernels::permute(self.value(a).data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> TensorResult<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::invalid("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        let out = self.value(a).reshape(shape)?.with_requires_grad(false);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        let src = self.value(a);
        let out_shape = broadcast_shape("broadcast_to", src.shape(), shape)?;
        if out_shape != shape {
            return Err(TensorError::mismatch("broadcast_to", src.shape(), shape));
        }
        let s = broadcast_strides(src.shape(), shape);
        let zeros = vec![0; shape.len()];
        let d = src.data();
        let mut out = vec![0.0; numel(shape)];
        for_each_broadcast(shape, &s, &zeros, |o, i, _| out[o] = d[i]);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::BroadcastTo(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> TensorResult<Var> {
        let first = parts
            .first()
            .map(|&v| self.shape(v).to_vec())
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        if axis >= first.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rest = s.len() == first.len() && (0..s.len()).all(|d| d == axis || s[d] == first[d]);
            if !same_rest {
                return Err(TensorError::mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> TensorResult<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Slice { src: a, axis, start }, rg))
    }

    /// Splits `axis` into `[0, at)` and `[at, extent)`.
    pub fn split(&mut self, a: Var, axis: usize, at: usize) -> TensorResult<(Var, Var)> {
        let extent = self
            .shape(a)
            .get(axis)
            .copied()
            .ok_or_else(|| TensorError::invalid("split", format!("axis {axis} out of range")))?;
        if at == 0 || at >= extent {
            return Err(TensorError::invalid(
                "split",
                format!("split point {at} outside (0, {extent})"),
            ));
        }
        Ok((self.slice(a, axis, 0, at)?, self.slice(a, axis, at, extent - at)?))
    }

    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> TensorResult<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(TensorError::invalid(
                "index_select",
                format!("indices {indices:?} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * extent + i) * inner;
                out.extend_from_slice(&d[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::IndexSelect {
                src: a,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> TensorResult<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid("sum_axis", format!("axis {axis} out of range")));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..extent {
                let src = &d[(o * extent + j) * inner..(o * extent + j + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(acc, x)| *acc += x);
            }
        }
        let mut out_shape = shape;
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> TensorResult<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| TensorError::invalid("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis, keepdim)?;
        Ok(self.mul_scalar(s, 1.0 / n as f64))
    }

    // ----- normalization -----

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> TensorResult<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::mismatch("layer_norm", &shape, self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(TensorError::invalid("layer_norm", "eps must be positive"));
        }
        let rows = numel(&shape) / d;
        let (xd, gd, bd) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mu) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * gd[i] + bd[i];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let keep = rg && self.grad_enabled;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: if keep { xhat } else { Vec::new() },
                rstd: if keep { rstd } else { Vec::new() },
            },
            rg,
        ))
    }

    fn row_softmax(&self, a: Var, log: bool) -> Tensor {
        let t = self.value(a);
        let d = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v -= max;
                z += v.exp();
            }
            if log {
                let lz = z.ln();
                row.iter_mut().for_each(|v| *v -= lz);
            } else {
                row.iter_mut().for_each(|v| *v = v.exp() / z);
            }
        }
        Tensor::new(t.shape().to_vec(), out).expect("shape preserved")
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = self.row_softmax(a, false);
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = self.row_softmax(a, true);
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    // ----- convolution -----

    /// Cross-correlation of `x: (B, C, H, W)` with `w: (O, C, k, k)` plus optional bias `(O)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> TensorResult<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || sx[1] != sw[1] {
            return Err(TensorError::mismatch("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(TensorError::mismatch("conv2d bias", &sw, self.shape(b)));
            }
        }
        let (batch, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let out_c = sw[0];
        let geom = ConvGeom::new(c, h, wd, sw[2], stride, pad).ok_or_else(|| {
            TensorError::invalid(
                "conv2d",
                format!("kernel {} stride {stride} pad {pad} does not fit {h}x{wd}", sw[2]),
            )
        })?;
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; batch * rows * ncol];
        let mut out = vec![0.0; batch * out_c * ncol];
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        for bi in 0..batch {
            let img = &xd[bi * c * h * wd..(bi + 1) * c * h * wd];
            let col = &mut cols[bi * rows * ncol..(bi + 1) * rows * ncol];
            im2col(img, &geom, col);
            let dst = &mut out[bi * out_c * ncol..(bi + 1) * out_c * ncol];
            gemm(
                out_c,
                rows,
                ncol,
                1.0,
                wdat,
                Layout::rows(rows),
                col,
                Layout::rows(ncol),
                0.0,
                dst,
            );
            if let Some(b) = b {
                for (o, bias) in self.value(b).data().iter().enumerate() {
                    dst[o * ncol..(o + 1) * ncol].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let out = Tensor::new(vec![batch, out_c, geom.ho, geom.wo], out)?;
        if !(rg && self.grad_enabled) {
            cols = Vec::new();
        }
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Mean over non-overlapping `k×k` windows of `(B, C, H, W)`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> TensorResult<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(TensorError::invalid(
                "avg_pool2d",
                format!("window {k} does not tile {s:?}"),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / k, w / k);
        let d = self.value(x).data();
        let scale = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * ho + y / k) * wo + xx / k] += d[(p * h + y) * w + xx] * scale;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![s[0], s[1], ho, wo], out)?, Op::AvgPool2d(x, k), rg))
    }

    // ----- backward -----

    /// Reverse sweep from a scalar `loss`, accumulating into every reachable node
    /// that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        let loss_shape = self.shape(loss);
        if numel(loss_shape) != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn add_grad(&mut self, v: Var, g: &[f64]) {
        if let Some(acc) = self.acc(v) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let out_shape = self.nodes[i].value.shape().to_vec();
        // Temporarily detach the op so its saved buffers can be read while
        // other nodes' gradients are mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Binary(a, b, kind) => self.back_binary(*a, *b, *kind, &out_shape, g),
            Op::AddScalar(a) => self.add_grad(*a, g),
            Op::MulScalar(a, s) => {
                let s = *s;
                if let Some(acc) = self.acc(*a) {
                    acc.iter_mut().zip(g).for_each(|(x, gi)| *x += s * gi);
                }
            }
            Op::Unary(a, kind) => {
                let contrib: Vec<f64> = self
                    .val(*a)
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .zip(g)
                    .map(|((&x, &y), gi)| gi * kind.derivative(x, y))
                    .collect();
                self.add_grad(*a, &contrib);
            }
            Op::Clip(a, lo, hi) => {
                let contrib: Vec<f64> = self
                    .val(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, gi)| if x >= *lo && x <= *hi { *gi } else { 0.0 })
                    .collect();
                self.add_grad(*a, &contrib);
            }
            Op::BceWithLogits(x, t) => {
                let contrib: Vec<f64> = self
                    .val(*x)
                    .iter()
                    .zip(self.val(*t))
                    .zip(g)
                    .map(|((&x, &t), gi)| gi * (kernels::sigmoid(x) - t))
                    .collect();
                self.add_grad(*x, &contrib);
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => self.back_matmul(*a, *b, *batch, *m, *k, *n, *shared_rhs, g),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                perm.iter().enumerate().for_each(|(d, &p)| inv[p] = d);
                let back = kernels::permute(g, &out_shape, &inv);
                self.add_grad(*a, &back);
            }
            Op::Reshape(a) => self.add_grad(*a, g),
            Op::BroadcastTo(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                if let Some(acc) = self.acc(*a) {
                    reduce_to_shape(g, &out_shape, &shape, acc);
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(&out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    if let Some(acc) = self.acc(p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            acc[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let src_shape = self.nodes[src.0].value.shape().to_vec();
                let (outer, extent, inner) = split_axis(&src_shape, *axis);
                let len = out_shape[*axis];
                if let Some(acc) = self.acc(*src) {
                    for o in 0..outer {
                        let base = (o * extent + start) * inner;
                        acc[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::IndexSelect { src, axis, indices } => {
                let src_shape = self.nodes[src.0].value.shape().to_vec();
                let (outer, extent, inner) = split_axis(&src_shape, *axis);
                if let Some(acc) = self.acc(*src) {
                    let mut gi = 0;
                    for o in 0..outer {
                        for &i in indices {
                            let base = (o * extent + i) * inner;
                            acc[base..base + inner]
                                .iter_mut()
                                .zip(&g[gi..gi + inner])
                                .for_each(|(x, y)| *x += y);
                            gi += inner;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                if let Some(acc) = self.acc(*a) {
                    acc.iter_mut().for_each(|x| *x += g0);
                }
            }
            Op::SumAxis(a, axis) => {
                let src_shape = self.nodes[a.0].value.shape().to_vec();
                let (outer, extent, inner) = split_axis(&src_shape, *axis);
                if let Some(acc) = self.acc(*a) {
                    for o in 0..outer {
                        for j in 0..extent {
                            acc[(o * extent + j) * inner..(o * extent + j + 1) * inner]
                                .iter_mut()
                                .zip(&g[o * inner..(o + 1) * inner])
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => self.back_layer_norm(*x, *gamma, *beta, xhat, rstd, g),
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data();
                let d = *out_shape.last().unwrap_or(&1);
                let mut contrib = vec![0.0; y.len()];
                for ((cr, yr), gr) in contrib.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        cr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.add_grad(*a, &contrib);
            }
            Op::LogSoftmax(a) => {
                let y = self.nodes[i].value.data();
                let d = *out_shape.last().unwrap_or(&1);
                let mut contrib = vec![0.0; y.len()];
                for ((cr, yr), gr) in contrib.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let gs: f64 = gr.iter().sum();
                    for j in 0..d {
                        cr[j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                self.add_grad(*a, &contrib);
            }
            Op::Conv2d { x, w, b, geom, cols } => self.back_conv(*x, *w, *b, geom, cols, &out_shape, g),
            Op::AvgPool2d(x, k) => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ho, wo) = (h / k, w / k);
                let scale = 1.0 / (k * k) as f64;
                if let Some(acc) = self.acc(*x) {
                    for p in 0..planes {
                        for y in 0..h {
                            for xx in 0..w {
                                acc[(p * h + y) * w + xx] += g[(p * ho + y / k) * wo + xx / k] * scale;
                            }
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    fn back_binary(&mut self, a: Var, b: Var, kind: Binary, out: &[usize], g: &[f64]) {
        let (ra, rb) = (self.rg(a), self.rg(b));
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        let (da, db) = (self.val(a), self.val(b));
        let mut ga = if ra { vec![0.0; da.len()] } else { Vec::new() };
        let mut gb = if rb { vec![0.0; db.len()] } else { Vec::new() };
        let sta = broadcast_strides(&sa, out);
        let stb = broadcast_strides(&sb, out);
        for_each_broadcast(out, &sta, &stb, |o, i, j| {
            let go = g[o];
            let (dga, dgb) = match kind {
                Binary::Add => (go, go),
                Binary::Sub => (go, -go),
                Binary::Mul => (go * db[j], go * da[i]),
                Binary::Div => (go / db[j], -go * da[i] / (db[j] * db[j])),
            };
            if ra {
                ga[i] += dga;
            }
            if rb {
                gb[j] += dgb;
            }
        });
        if ra {
            self.add_grad(a, &ga);
        }
        if rb {
            self.add_grad(b, &gb);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn back_matmul(&mut self, a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool, g: &[f64]) {
        if self.rg(a) {
            let db = self.val(b);
            let mut ga = vec![0.0; batch * m * k];
            if shared_rhs {
                gemm(
                    batch * m,
                    n,
                    k,
                    1.0,
                    g,
                    Layout::rows(n),
                    db,
                    Layout::transposed(n),
                    0.0,
                    &mut ga,
                );
            } else {
                for bi in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        &g[bi * m * n..],
                        Layout::rows(n),
                        &db[bi * k * n..],
                        Layout::transposed(n),
                        0.0,
                        &mut ga[bi * m * k..],
                    );
                }
            }
            self.add_grad(a, &ga);
        }
        if self.rg(b) {
            let da = self.val(a);
            let mut gb = vec![0.0; if shared_rhs { k * n } else { batch * k * n }];
            if shared_rhs {
                gemm(
                    k,
                    batch * m,
                    n,
                    1.0,
                    da,
                    Layout::transposed(k),
                    g,
                    Layout::rows(n),
                    0.0,
                    &mut gb,
                );
            } else {
                for bi in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        &da[bi * m * k..],
                        Layout::transposed(k),
                        &g[bi * m * n..],
                        Layout::rows(n),
                        0.0,
                        &mut gb[bi * k * n..],
                    );
                }
            }
            self.add_grad(b, &gb);
        }
    }

    fn back_layer_norm(&mut self, x: Var, gamma: Var, beta: Var, xhat: &[f64], rstd: &[f64], g: &[f64]) {
        let d = self.nodes[gamma.0].value.numel();
        let rows = rstd.len();
        if self.rg(gamma) || self.rg(beta) {
            let mut gg = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            for r in 0..rows {
                for j in 0..d {
                    gg[j] += g[r * d + j] * xhat[r * d + j];
                    gbeta[j] += g[r * d + j];
                }
            }
            self.add_grad(gamma, &gg);
            self.add_grad(beta, &gbeta);
        }
        if self.rg(x) {
            let gd = self.val(gamma);
            let mut gx = vec![0.0; rows * d];
            for r in 0..rows {
                let (mut mean_dh, mut mean_dh_h) = (0.0, 0.0);
                for j in 0..d {
                    let dh = g[r * d + j] * gd[j];
                    mean_dh += dh;
                    mean_dh_h += dh * xhat[r * d + j];
                }
                mean_dh /= d as f64;
                mean_dh_h /= d as f64;
                for j in 0..d {
                    let dh = g[r * d + j] * gd[j];
                    gx[r * d + j] = rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                }
            }
            self.add_grad(x, &gx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn back_conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        cols: &[f64],
        out_shape: &[usize],
        g: &[f64],
    ) {
        let (batch, out_c) = (out_shape[0], out_shape[1]);
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        if let Some(b) = b.filter(|&b| self.rg(b)) {
            let mut gb = vec![0.0; out_c];
            for bi in 0..batch {
                for (o, acc) in gb.iter_mut().enumerate() {
                    let base = (bi * out_c + o) * ncol;
                    *acc += g[base..base + ncol].iter().sum::<f64>();
                }
            }
            self.add_grad(b, &gb);
        }
        if self.rg(w) {
            let mut gw = vec![0.0; out_c * rows];
            for bi in 0..batch {
                gemm(
                    out_c,
                    ncol,
                    rows,
                    1.0,
                    &g[bi * out_c * ncol..],
                    Layout::rows(ncol),
                    &cols[bi * rows * ncol..],
                    Layout::transposed(ncol),
                    1.0,
                    &mut gw,
                );
            }
            self.add_grad(w, &gw);
        }
        if self.rg(x) {
            let img = geom.c * geom.h * geom.w;
            let wd = self.val(w);
            let mut gcol = vec![0.0; rows * ncol];
            let mut gx = vec![0.0; batch * img];
            for bi in 0..batch {
                gemm(
                    rows,
                    out_c,
                    ncol,
                    1.0,
                    wd,
                    Layout::transposed(rows),
                    &g[bi * out_c * ncol..],
                    Layout::rows(ncol),
                    0.0,
                    &mut gcol,
                );
                col2im(&gcol, geom, &mut gx[bi * img..(bi + 1) * img]);
            }
            self.add_grad(x, &gx);
        }
    }
}
