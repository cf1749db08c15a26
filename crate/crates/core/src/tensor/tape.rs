//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Operations append nodes in execution order, so the tape is already
//! topologically sorted: every node's inputs sit at smaller indices.
//! `backward` walks the nodes in exact reverse execution order and
//! accumulates gradients into every node that participates in the
//! differentiable subgraph.

use super::{numel_of, strides_of, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: T,
    },
    Gelu {
        x: Var,
    },
    /// Normalization over the last axis. `inv_std` holds one entry per
    /// normalized row, `xhat` the normalized values (same size as the input).
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<T>,
        xhat: Vec<T>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Slice {
        x: Var,
        start: Vec<usize>,
    },
    Concat {
        axis: usize,
        parts: Vec<Var>,
    },
    /// x[..., c] + v[c]
    AddVec {
        x: Var,
        v: Var,
    },
    /// x[..., c] * v[c]
    MulVec {
        x: Var,
        v: Var,
    },
    MeanAxes {
        x: Var,
        axes: Vec<usize>,
    },
    SoftmaxAxis {
        x: Var,
        axis: usize,
    },
    /// Mean over the batch of -sum(q * log softmax(logits)).
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        smoothing: T,
        probs: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed differentiable operations.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf node.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        self.nodes[v.0].value.scalar_value()
    }

    /// Gradient of the last `backward` call with respect to `v`, if any
    /// was accumulated.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape matches value")
        })
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- operations ------------------------------------------------------

    /// 2-D matrix product. Gradient rules: dA = dY * B^T, dB = A^T * dY.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("incompatible operands {sa:?} x {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, needs, Op::Matmul { a, b }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, needs, Op::Add { a, b }))
    }

    /// Multiply by a compile-time-known scalar constant.
    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let out: Vec<T> = self.data(x).iter().map(|v| *v * k).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, needs, Op::Scale { x, k }))
    }

    /// Exact GELU: x * Phi(x) with Phi the standard normal CDF (erf form).
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.data(x).iter().map(|v| *v * normal_cdf(*v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, needs, Op::Gelu { x }))
    }

    /// LayerNorm over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| {
            Error::shape("layer_norm", "input must have at least one axis")
        })?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must both be [{c}] for input {:?}",
                    self.shape(gamma),
                    self.shape(beta),
                    shape
                ),
            ));
        }
        let rows = numel_of(&shape) / c;
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut out = vec![T::zero(); xd.len()];
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        let cf = T::from_f64(c as f64);
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mut mean = T::zero();
            for v in row {
                mean = mean + *v;
            }
            mean = mean / cf;
            let mut var = T::zero();
            for v in row {
                let d = *v - mean;
                var = var + d * d;
            }
            var = var / cf;
            let inv = (var + eps).sqrt().recip();
            inv_std[r] = inv;
            for i in 0..c {
                let h = (row[i] - mean) * inv;
                xhat[r * c + i] = h;
                out[r * c + i] = gd[i] * h + bd[i];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            needs,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            },
        ))
    }

    /// Reinterpret the buffer under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var> {
        if numel_of(new_shape) != self.data(x).len() {
            return Err(Error::shape(
                "reshape",
                format!(
                    "{:?} ({} elements) -> {new_shape:?} ({} elements)",
                    self.shape(x),
                    self.data(x).len(),
                    numel_of(new_shape)
                ),
            ));
        }
        let out = Tensor::new(new_shape.to_vec(), self.data(x).to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::Reshape { x }))
    }

    /// Reorder axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} is not a permutation of 0..{rank}"),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = permute_data(self.data(x), &shape, axes, &out_shape);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            needs,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Rectangular sub-block, one half-open range per axis.
    pub fn slice(&mut self, x: Var, ranges: &[(usize, usize)]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if ranges.len() != shape.len() {
            return Err(Error::shape(
                "slice",
                format!("{} ranges for rank-{} tensor", ranges.len(), shape.len()),
            ));
        }
        for (d, &(lo, hi)) in ranges.iter().enumerate() {
            if lo >= hi || hi > shape[d] {
                return Err(Error::shape(
                    "slice",
                    format!("range {lo}..{hi} invalid for axis {d} of extent {}", shape[d]),
                ));
            }
        }
        let out_shape: Vec<usize> = ranges.iter().map(|&(lo, hi)| hi - lo).collect();
        let start: Vec<usize> = ranges.iter().map(|&(lo, _)| lo).collect();
        let in_strides = strides_of(&shape);
        let mut out = vec![T::zero(); numel_of(&out_shape)];
        let xd = self.data(x);
        let mut idx = vec![0usize; out_shape.len()];
        for slot in out.iter_mut() {
            let mut off = 0;
            for d in 0..idx.len() {
                off += (idx[d] + start[d]) * in_strides[d];
            }
            *slot = xd[off];
            bump(&mut idx, &out_shape);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            needs,
            Op::Slice { x, start },
        ))
    }

    /// Join same-rank tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for rank {}", first.len()),
            ));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(Error::shape(
                    "concat",
                    format!("shape {s:?} incompatible with {first:?} along axis {axis}"),
                ));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        // Copy block-wise: outer = product of extents before `axis`,
        // inner = product after.
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::zero(); numel_of(&out_shape)];
        let row = axis_total * inner;
        let mut col_off = 0;
        for &p in parts {
            let e = self.shape(p)[axis];
            let pd = self.data(p);
            for o in 0..outer {
                let src = &pd[o * e * inner..(o + 1) * e * inner];
                let dst = &mut out[o * row + col_off..o * row + col_off + e * inner];
                dst.copy_from_slice(src);
            }
            col_off += e * inner;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            needs,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
        ))
    }

    /// Broadcast add of a vector over the trailing axis.
    pub fn add_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        self.vec_op(x, v, "add_vec", |a, b| a + b, |x, v| Op::AddVec { x, v })
    }

    /// Broadcast multiply by a vector over the trailing axis.
    pub fn mul_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        self.vec_op(x, v, "mul_vec", |a, b| a * b, |x, v| Op::MulVec { x, v })
    }

    fn vec_op(
        &mut self,
        x: Var,
        v: Var,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: impl Fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::shape(name, "input must have at least one axis"))?;
        if self.shape(v) != [c] {
            return Err(Error::shape(
                name,
                format!("vector {:?} vs trailing extent {c}", self.shape(v)),
            ));
        }
        let vd = self.data(v).to_vec();
        let out: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, a)| f(*a, vd[i % c]))
            .collect();
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(Tensor::new(shape, out)?, needs, op(x, v)))
    }

    /// Mean over the given axes; reduced axes are squeezed out.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || sorted.iter().any(|&a| a >= rank) {
            return Err(Error::shape(
                "mean_axes",
                format!("axes {axes:?} invalid for rank {rank}"),
            ));
        }
        let reduce: Vec<bool> = (0..rank).map(|d| sorted.contains(&d)).collect();
        let out_shape: Vec<usize> = (0..rank)
            .filter(|&d| !reduce[d])
            .map(|d| shape[d])
            .collect();
        let n: usize = sorted.iter().map(|&d| shape[d]).product();
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut out = vec![T::zero(); numel_of(&out_shape)];
        let out_strides = strides_of(&out_shape);
        let xd = self.data(x);
        let mut idx = vec![0usize; rank];
        for v in xd {
            let mut off = 0;
            let mut od = 0;
            for d in 0..rank {
                if !reduce[d] {
                    off += idx[d] * out_strides[od];
                    od += 1;
                }
            }
            out[off] = out[off] + *v * inv_n;
            bump(&mut idx, &shape);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            needs,
            Op::MeanAxes { x, axes: sorted },
        ))
    }

    /// Mean of every element, producing a rank-0 scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        let axes: Vec<usize> = (0..rank).collect();
        self.mean_axes(x, &axes)
    }

    /// Softmax along one axis.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax_axis",
                format!("axis {axis} out of range for rank {}", shape.len()),
            ));
        }
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for_each_line(&shape, axis, |base, stride, len| {
            let mut mx = T::neg_infinity();
            for i in 0..len {
                let v = xd[base + i * stride];
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = T::zero();
            for i in 0..len {
                let e = (xd[base + i * stride] - mx).exp();
                out[base + i * stride] = e;
                denom = denom + e;
            }
            for i in 0..len {
                out[base + i * stride] = out[base + i * stride] / denom;
            }
        });
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            needs,
            Op::SoftmaxAxis { x, axis },
        ))
    }

    /// Smoothed cross-entropy between logits `[B, K]` and integer labels,
    /// averaged over the batch. Returns a rank-0 scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: T) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits must be [batch, classes], got {shape:?}"),
            ));
        }
        let (b, k) = (shape[0], shape[1]);
        if labels.len() != b {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for batch of {b}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Train(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let xd = self.data(logits);
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        let uniform = smoothing / T::from_f64(k as f64);
        let on = T::one() - smoothing;
        for r in 0..b {
            let row = &xd[r * k..(r + 1) * k];
            let mut mx = T::neg_infinity();
            for v in row {
                if *v > mx {
                    mx = *v;
                }
            }
            let mut denom = T::zero();
            for i in 0..k {
                let e = (row[i] - mx).exp();
                probs[r * k + i] = e;
                denom = denom + e;
            }
            let lse = mx + denom.ln();
            for i in 0..k {
                probs[r * k + i] = probs[r * k + i] / denom;
                let q = uniform + if i == labels[r] { on } else { T::zero() };
                loss = loss + q * (lse - row[i]);
            }
        }
        loss = loss / T::from_f64(b as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::new(vec![], vec![loss])?,
            needs,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                smoothing,
                probs,
            },
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Populate gradients of `loss` with respect to every participating
    /// node. `loss` must be a scalar. A tape supports exactly one backward
    /// pass; repeated calls are rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; build a fresh tape instead".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Autodiff(format!(
                "loss handle {} is not on this tape",
                loss.0
            )));
        }
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].needs_grad {
            // Nothing on the tape requires gradients; all grads stay zero.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.nodes[i].grad.clone().expect("checked above");
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contrib) {
                    *gi = *gi + *ci;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Ops only reference smaller indices. Each node is visited once, so
        // taking the op out (and retiring the node to a leaf) sidesteps any
        // aliasing between the op's saved context and gradient buffers.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let m = self.shape(a)[0];
                let k = self.shape(a)[1];
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_nt(g, self.data(b), &mut da, m, n, k);
                    self.accumulate(a, da);
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_tn(self.data(a), g, &mut db, m, k, n);
                    self.accumulate(b, db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            Op::Scale { x, k } => {
                self.accumulate(x, g.iter().map(|v| *v * k).collect());
            }
            Op::Gelu { x } => {
                let xd = self.data(x);
                let dx: Vec<T> = xd
                    .iter()
                    .zip(g)
                    .map(|(v, gi)| *gi * (normal_cdf(*v) + *v * normal_pdf(*v)))
                    .collect();
                self.accumulate(x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            } => {
                let c = *self.shape(gamma).first().expect("gamma is rank 1");
                let rows = xhat.len() / c;
                let cf = T::from_f64(c as f64);
                let gd = self.data(gamma);
                let mut dx = vec![T::zero(); xhat.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for r in 0..rows {
                    let inv = inv_std[r];
                    let mut m1 = T::zero(); // mean of gamma*dy
                    let mut m2 = T::zero(); // mean of gamma*dy*xhat
                    for i in 0..c {
                        let gy = gd[i] * g[r * c + i];
                        m1 = m1 + gy;
                        m2 = m2 + gy * xhat[r * c + i];
                    }
                    m1 = m1 / cf;
                    m2 = m2 / cf;
                    for i in 0..c {
                        let gy = gd[i] * g[r * c + i];
                        dx[r * c + i] = inv * (gy - m1 - xhat[r * c + i] * m2);
                        dgamma[i] = dgamma[i] + g[r * c + i] * xhat[r * c + i];
                        dbeta[i] = dbeta[i] + g[r * c + i];
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
            }
            Op::Reshape { x } => {
                self.accumulate(x, g.to_vec());
            }
            Op::Permute { x, axes } => {
                // Gradient flows through the inverse permutation.
                let mut inverse = vec![0usize; axes.len()];
                for (d, &a) in axes.iter().enumerate() {
                    inverse[a] = d;
                }
                let out_shape = self.shape(Var(i)).to_vec();
                let in_shape = self.shape(x).to_vec();
                let dx = permute_data(g, &out_shape, &inverse, &in_shape);
                self.accumulate(x, dx);
            }
            Op::Slice { x, start } => {
                let in_shape = self.shape(x).to_vec();
                let out_shape = self.shape(Var(i)).to_vec();
                let in_strides = strides_of(&in_shape);
                let mut dx = vec![T::zero(); numel_of(&in_shape)];
                let mut idx = vec![0usize; out_shape.len()];
                for gi in g {
                    let mut off = 0;
                    for d in 0..idx.len() {
                        off += (idx[d] + start[d]) * in_strides[d];
                    }
                    dx[off] = *gi;
                    bump(&mut idx, &out_shape);
                }
                self.accumulate(x, dx);
            }
            Op::Concat { axis, parts } => {
                let out_shape = self.shape(Var(i)).to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[axis] * inner;
                let mut col_off = 0;
                for p in parts {
                    let e = self.shape(p)[axis];
                    let mut dp = vec![T::zero(); self.data(p).len()];
                    for o in 0..outer {
                        let src = &g[o * row + col_off..o * row + col_off + e * inner];
                        dp[o * e * inner..(o + 1) * e * inner].copy_from_slice(src);
                    }
                    col_off += e * inner;
                    self.accumulate(p, dp);
                }
            }
            Op::AddVec { x, v } => {
                let c = self.data(v).len();
                if self.needs(x) {
                    self.accumulate(x, g.to_vec());
                }
                if self.needs(v) {
                    let mut dv = vec![T::zero(); c];
                    for (i, gi) in g.iter().enumerate() {
                        dv[i % c] = dv[i % c] + *gi;
                    }
                    self.accumulate(v, dv);
                }
            }
            Op::MulVec { x, v } => {
                let c = self.data(v).len();
                if self.needs(x) {
                    let vd = self.data(v);
                    let dx: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| *gi * vd[i % c])
                        .collect();
                    self.accumulate(x, dx);
                }
                if self.needs(v) {
                    let xd = self.data(x);
                    let mut dv = vec![T::zero(); c];
                    for (i, gi) in g.iter().enumerate() {
                        dv[i % c] = dv[i % c] + *gi * xd[i];
                    }
                    self.accumulate(v, dv);
                }
            }
            Op::MeanAxes { x, axes } => {
                let in_shape = self.shape(x).to_vec();
                let rank = in_shape.len();
                let reduce: Vec<bool> = (0..rank).map(|d| axes.contains(&d)).collect();
                let out_shape = self.shape(Var(i)).to_vec();
                let out_strides = strides_of(&out_shape);
                let n: usize = axes.iter().map(|&d| in_shape[d]).product();
                let inv_n = T::from_f64(1.0 / n as f64);
                let mut dx = vec![T::zero(); numel_of(&in_shape)];
                let mut idx = vec![0usize; rank];
                for slot in dx.iter_mut() {
                    let mut off = 0;
                    let mut od = 0;
                    for d in 0..rank {
                        if !reduce[d] {
                            off += idx[d] * out_strides[od];
                            od += 1;
                        }
                    }
                    *slot = g[off] * inv_n;
                    bump(&mut idx, &in_shape);
                }
                self.accumulate(x, dx);
            }
            Op::SoftmaxAxis { x, axis } => {
                let shape = self.shape(Var(i)).to_vec();
                let sd = self.data(Var(i)).to_vec();
                let mut dx = vec![T::zero(); sd.len()];
                for_each_line(&shape, axis, |base, stride, len| {
                    let mut dot = T::zero();
                    for j in 0..len {
                        let o = base + j * stride;
                        dot = dot + g[o] * sd[o];
                    }
                    for j in 0..len {
                        let o = base + j * stride;
                        dx[o] = sd[o] * (g[o] - dot);
                    }
                });
                self.accumulate(x, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                smoothing,
                probs,
            } => {
                let k = self.shape(logits)[1];
                let b = labels.len();
                let scale = g[0] / T::from_f64(b as f64);
                let uniform = smoothing / T::from_f64(k as f64);
                let on = T::one() - smoothing;
                let mut dl = vec![T::zero(); b * k];
                for r in 0..b {
                    for c in 0..k {
                        let q = uniform + if c == labels[r] { on } else { T::zero() };
                        dl[r * k + c] = (probs[r * k + c] - q) * scale;
                    }
                }
                self.accumulate(logits, dl);
            }
        }
    }
}

/// Standard normal CDF via erf.
fn normal_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * (T::one() + (x * inv_sqrt2).erf())
}

/// Standard normal density.
fn normal_pdf<T: Scalar>(x: T) -> T {
    let c = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    c * (-(x * x) * T::from_f64(0.5)).exp()
}

/// C[m,n] += A[m,k] * B[k,n]
fn matmul_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

/// C[m,k] += A[m,n] * B[k,n]^T
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        for j in 0..k {
            let mut s = T::zero();
            let arow = &a[i * n..(i + 1) * n];
            let brow = &b[j * n..(j + 1) * n];
            for p in 0..n {
                s = s + arow[p] * brow[p];
            }
            c[i * k + j] = c[i * k + j] + s;
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n]
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..m {
        for i in 0..k {
            let av = a[p * k + i];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

fn permute_data<T: Scalar>(
    data: &[T],
    in_shape: &[usize],
    axes: &[usize],
    out_shape: &[usize],
) -> Vec<T> {
    let in_strides = strides_of(in_shape);
    let mut out = vec![T::zero(); data.len()];
    let mut idx = vec![0usize; out_shape.len()];
    for slot in out.iter_mut() {
        let mut off = 0;
        for d in 0..idx.len() {
            off += idx[d] * in_strides[axes[d]];
        }
        *slot = data[off];
        bump(&mut idx, out_shape);
    }
    out
}

/// Advance a multi-index in row-major order.
fn bump(idx: &mut [usize], shape: &[usize]) {
    for d in (0..idx.len()).rev() {
        idx[d] += 1;
        if idx[d] < shape[d] {
            return;
        }
        idx[d] = 0;
    }
}

/// Visit every 1-D line along `axis`: calls f(base_offset, stride, len).
fn for_each_line(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let strides = strides_of(shape);
    let len = shape[axis];
    let stride = strides[axis];
    let total: usize = shape.iter().product();
    let lines = total / len;
    let mut outer_shape: Vec<usize> = shape.to_vec();
    outer_shape.remove(axis);
    let mut outer_strides: Vec<usize> = strides.clone();
    outer_strides.remove(axis);
    let mut idx = vec![0usize; outer_shape.len()];
    for _ in 0..lines {
        let mut base = 0;
        for d in 0..idx.len() {
            base += idx[d] * outer_strides[d];
        }
        f(base, stride, len);
        bump(&mut idx, &outer_shape);
    }
}
