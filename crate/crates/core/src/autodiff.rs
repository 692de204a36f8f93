//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as it executes (define-by-run). Nodes
//! are addressed by [`NodeId`] indices; calling [`Tape::backward`] on a
//! scalar node sweeps the record once in reverse execution order and
//! accumulates gradients into every node, including leaves. The op vocabulary
//! is exactly what the prediction models need — no broadcasting, no dynamic
//! shapes.
//!
//! Tapes are single-threaded; independent tapes may run concurrently.

use std::sync::Arc;

use crate::conv;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// A named trainable tensor plus its accumulated gradient.
///
/// The value lives behind an `Arc` so forward passes can record it on a tape
/// without copying; the trainer mutates it between passes via
/// [`Parameter::value_mut`], when no tape holds a reference.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    value: Arc<Tensor<T>>,
    grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value: Arc::new(value),
            grad,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    /// Shared handle for recording on a tape without copying the data.
    pub fn shared_value(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    /// Mutable access for optimizer updates. Must not be called while a tape
    /// still holds the value (it would silently copy-on-write).
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::ZERO);
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<T>) {
        debug_assert_eq!(self.grad.shape(), g.shape());
        for (d, &s) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *d += s;
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// One recorded operation; fields are the input node indices.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    Deconv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    Relu {
        input: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    LinearCombine {
        basis: NodeId,
        weights: NodeId,
    },
    SoftmaxChannels {
        input: NodeId,
    },
    MseLoss {
        pred: NodeId,
        target: NodeId,
    },
    TileAction {
        action: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    AddRowBias {
        input: NodeId,
        bias: NodeId,
    },
    MulElem {
        a: NodeId,
        b: NodeId,
    },
    Reshape {
        input: NodeId,
    },
    SumChannels {
        input: NodeId,
    },
    Advect {
        prev: NodeId,
        kernels: NodeId,
    },
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    op: Op,
    grad: Option<Tensor<T>>,
}

/// Define-by-run recording of a differentiable computation.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> NodeId {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input (constant or parameter) node.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Records an input without copying; used for model parameters.
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>) -> NodeId {
        self.push_shared(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by [`Tape::backward`]; `None` when the node does
    /// not influence the loss (treated as a zero gradient).
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn add_grad(&mut self, id: NodeId, g: Tensor<T>) {
        match &mut self.nodes[id.0].grad {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape());
                for (d, &s) in acc.data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    // ---- ops ------------------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let out = conv::conv2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn deconv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let out = conv::deconv2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
        )?;
        Ok(self.push(
            out,
            Op::Deconv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(|v| v.maximum(T::ZERO));
        self.push(out, Op::Relu { input })
    }

    /// Channel concatenation of two `[B,H,W,C]` tensors.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 4 || vb.rank() != 4 || va.shape()[..3] != vb.shape()[..3] {
            return Err(Error::shapes("concat_channels", va.shape(), vb.shape()));
        }
        let (ca, cb) = (va.shape()[3], vb.shape()[3]);
        let mut shape = va.shape().to_vec();
        shape[3] = ca + cb;
        let mut out = Tensor::zeros(&shape);
        {
            let dst = out.data_mut();
            let (da, db) = (va.data(), vb.data());
            let pixels: usize = shape[..3].iter().product();
            for px in 0..pixels {
                dst[px * (ca + cb)..px * (ca + cb) + ca].copy_from_slice(&da[px * ca..(px + 1) * ca]);
                dst[px * (ca + cb) + ca..(px + 1) * (ca + cb)]
                    .copy_from_slice(&db[px * cb..(px + 1) * cb]);
            }
        }
        Ok(self.push(out, Op::ConcatChannels { a, b }))
    }

    /// `out[b,h,w,0] = Σ_i weights[i] · basis[b,h,w,i]`; no bias.
    pub fn linear_combine(&mut self, basis: NodeId, weights: NodeId) -> Result<NodeId> {
        let (vb, vw) = (self.value(basis), self.value(weights));
        if vb.rank() != 4 || vw.rank() != 1 || vb.shape()[3] != vw.shape()[0] {
            return Err(Error::shapes("linear_combine", vb.shape(), vw.shape()));
        }
        let n_b = vw.shape()[0];
        let mut shape = vb.shape().to_vec();
        shape[3] = 1;
        let mut out = Tensor::zeros(&shape);
        {
            let w = vw.data();
            for (o, px) in out.data_mut().iter_mut().zip(vb.data().chunks_exact(n_b)) {
                *o = px.iter().zip(w).map(|(&x, &wi)| x * wi).sum();
            }
        }
        Ok(self.push(out, Op::LinearCombine { basis, weights }))
    }

    /// Softmax over the last axis, stabilized by max-subtraction.
    pub fn softmax_channels(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let c = *v.shape().last().expect("nonempty shape");
        let out = softmax_last_axis(v, c);
        self.push(out, Op::SoftmaxChannels { input })
    }

    /// Mean of squared elementwise differences; yields a scalar node.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (vp, vt) = (self.value(pred), self.value(target));
        if vp.shape() != vt.shape() {
            return Err(Error::shapes("mse_loss", vp.shape(), vt.shape()));
        }
        let n = T::from_f64(vp.numel() as f64);
        let sum: T = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(Tensor::scalar(sum / n), Op::MseLoss { pred, target }))
    }

    /// Tiles a `[B,C]` action across space into `[B,height,width,C]`.
    pub fn tile_action(&mut self, action: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let v = self.value(action);
        if v.rank() != 2 {
            return Err(Error::InvalidConfig(format!(
                "tile_action expects [B,C] input, got {:?}",
                v.shape()
            )));
        }
        let (batch, c) = (v.shape()[0], v.shape()[1]);
        let src = v.data();
        let out = Tensor::from_fn(&[batch, height, width, c], |i| {
            let ch = i % c;
            let b = i / (height * width * c);
            src[b * c + ch]
        });
        Ok(self.push(out, Op::TileAction { action }))
    }

    /// `[M,K] @ [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shapes("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, va.data(), false, vb.data(), false, out.data_mut(), false);
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    /// Adds a `[N]` bias to every row of a `[M,N]` matrix.
    pub fn add_row_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vi, vb) = (self.value(input), self.value(bias));
        if vi.rank() != 2 || vb.rank() != 1 || vi.shape()[1] != vb.shape()[0] {
            return Err(Error::shapes("add_row_bias", vi.shape(), vb.shape()));
        }
        let n = vb.shape()[0];
        let bd = vb.data();
        let mut out = Tensor::clone(vi);
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(bd) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRowBias { input, bias }))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self
            .value(a)
            .zip(self.value(b), "mul_elem", |x, y| x * y)?;
        Ok(self.push(out, Op::MulElem { a, b }))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(input).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { input }))
    }

    /// Sums a `[B,H,W,C]` tensor over channels into `[B,H,W,1]`.
    pub fn sum_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.value(input);
        if v.rank() != 4 {
            return Err(Error::InvalidConfig(format!(
                "sum_channels expects rank-4 input, got {:?}",
                v.shape()
            )));
        }
        let c = v.shape()[3];
        let mut shape = v.shape().to_vec();
        shape[3] = 1;
        let mut out = Tensor::zeros(&shape);
        for (o, px) in out.data_mut().iter_mut().zip(v.data().chunks_exact(c)) {
            *o = px.iter().copied().sum();
        }
        Ok(self.push(out, Op::SumChannels { input }))
    }

    /// Convolves `prev` `[B,H,W,1]` with each normalized kernel in
    /// `[m,k,k]` ("same" extent, replicate-edge padding) into `[B,H,W,m]`.
    pub fn advect(&mut self, prev: NodeId, kernels: NodeId) -> Result<NodeId> {
        let (vp, vk) = (self.value(prev), self.value(kernels));
        if vp.rank() != 4 || vp.shape()[3] != 1 {
            return Err(Error::InvalidConfig(format!(
                "advect expects [B,H,W,1] frame, got {:?}",
                vp.shape()
            )));
        }
        if vk.rank() != 3 || vk.shape()[1] != vk.shape()[2] {
            return Err(Error::shapes("advect", vp.shape(), vk.shape()));
        }
        if vk.shape()[1] % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "advect kernels must have odd size, got {}",
                vk.shape()[1]
            )));
        }
        let out = advect_forward(vp, vk);
        Ok(self.push(out, Op::Advect { prev, kernels }))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates gradients of `loss` into every node on the tape.
    ///
    /// Ops are visited exactly once, in reverse execution order; nodes that do
    /// not influence the loss keep a zero (absent) gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let loss_shape = self.value(loss).shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::InvalidConfig(format!(
                "backward requires a scalar node, got shape {loss_shape:?}"
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::from_vec(&loss_shape, vec![T::ONE]).unwrap());

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            match self.nodes[i].op.clone() {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let (dx, dw, db) = conv::conv2d_grads(
                        self.value(input),
                        self.value(weight),
                        &g,
                        stride,
                        padding,
                    );
                    self.add_grad(input, dx);
                    self.add_grad(weight, dw);
                    self.add_grad(bias, db);
                }
                Op::Deconv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let (dx, dw, db) = conv::deconv2d_grads(
                        self.value(input),
                        self.value(weight),
                        &g,
                        stride,
                        padding,
                    );
                    self.add_grad(input, dx);
                    self.add_grad(weight, dw);
                    self.add_grad(bias, db);
                }
                Op::Relu { input } => {
                    let x = self.value(input);
                    let dx = Tensor::from_fn(x.shape(), |j| {
                        if x.data()[j] > T::ZERO {
                            g.data()[j]
                        } else {
                            T::ZERO
                        }
                    });
                    self.add_grad(input, dx);
                }
                Op::ConcatChannels { a, b } => {
                    let (ca, cb) = (self.value(a).shape()[3], self.value(b).shape()[3]);
                    let pixels: usize = self.value(a).shape()[..3].iter().product();
                    let mut da = Tensor::zeros(self.value(a).shape());
                    let mut db = Tensor::zeros(self.value(b).shape());
                    let gd = g.data();
                    for px in 0..pixels {
                        da.data_mut()[px * ca..(px + 1) * ca]
                            .copy_from_slice(&gd[px * (ca + cb)..px * (ca + cb) + ca]);
                        db.data_mut()[px * cb..(px + 1) * cb]
                            .copy_from_slice(&gd[px * (ca + cb) + ca..(px + 1) * (ca + cb)]);
                    }
                    self.add_grad(a, da);
                    self.add_grad(b, db);
                }
                Op::LinearCombine { basis, weights } => {
                    let vb = self.value(basis);
                    let vw = self.value(weights);
                    let n_b = vw.shape()[0];
                    let w = vw.data();
                    let mut dbasis = Tensor::zeros(vb.shape());
                    let mut dweights = Tensor::zeros(vw.shape());
                    for ((&gp, bpx), dpx) in g
                        .data()
                        .iter()
                        .zip(vb.data().chunks_exact(n_b))
                        .zip(dbasis.data_mut().chunks_exact_mut(n_b))
                    {
                        for i in 0..n_b {
                            dpx[i] = gp * w[i];
                            dweights.data_mut()[i] += gp * bpx[i];
                        }
                    }
                    self.add_grad(basis, dbasis);
                    self.add_grad(weights, dweights);
                }
                Op::SoftmaxChannels { input } => {
                    let s = &self.nodes[i].value;
                    let c = *s.shape().last().unwrap();
                    let mut dx = Tensor::zeros(s.shape());
                    for ((gpx, spx), dpx) in g
                        .data()
                        .chunks_exact(c)
                        .zip(s.data().chunks_exact(c))
                        .zip(dx.data_mut().chunks_exact_mut(c))
                    {
                        let dot: T = gpx.iter().zip(spx).map(|(&gj, &sj)| gj * sj).sum();
                        for j in 0..c {
                            dpx[j] = spx[j] * (gpx[j] - dot);
                        }
                    }
                    self.add_grad(input, dx);
                }
                Op::MseLoss { pred, target } => {
                    let gp = g.data()[0];
                    let (vp, vt) = (self.value(pred), self.value(target));
                    let scale = gp * T::from_f64(2.0 / vp.numel() as f64);
                    let diff = vp
                        .zip(vt, "mse_loss", |p, t| (p - t) * scale)
                        .expect("shapes checked in forward");
                    let dtarget = diff.map(|v| -v);
                    self.add_grad(pred, diff);
                    self.add_grad(target, dtarget);
                }
                Op::TileAction { action } => {
                    let va = self.value(action);
                    let (batch, c) = (va.shape()[0], va.shape()[1]);
                    let mut da = Tensor::zeros(va.shape());
                    let pixels = g.numel() / (batch * c);
                    for b in 0..batch {
                        for px in 0..pixels {
                            for ch in 0..c {
                                da.data_mut()[b * c + ch] +=
                                    g.data()[(b * pixels + px) * c + ch];
                            }
                        }
                    }
                    self.add_grad(action, da);
                }
                Op::MatMul { a, b } => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    let mut da = Tensor::zeros(va.shape());
                    let mut db = Tensor::zeros(vb.shape());
                    // dA = G @ B^T ; dB = A^T @ G
                    gemm(m, n, k, g.data(), false, vb.data(), true, da.data_mut(), false);
                    gemm(k, m, n, va.data(), true, g.data(), false, db.data_mut(), false);
                    self.add_grad(a, da);
                    self.add_grad(b, db);
                }
                Op::AddRowBias { input, bias } => {
                    let n = self.value(bias).shape()[0];
                    let mut db = Tensor::zeros(&[n]);
                    for row in g.data().chunks_exact(n) {
                        for (d, &gv) in db.data_mut().iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.add_grad(input, g.clone());
                    self.add_grad(bias, db);
                }
                Op::MulElem { a, b } => {
                    let da = g
                        .zip(self.value(b), "mul_elem", |gv, bv| gv * bv)
                        .expect("shapes checked in forward");
                    let db = g
                        .zip(self.value(a), "mul_elem", |gv, av| gv * av)
                        .expect("shapes checked in forward");
                    self.add_grad(a, da);
                    self.add_grad(b, db);
                }
                Op::Reshape { input } => {
                    let dx = g
                        .reshape(self.value(input).shape())
                        .expect("numel preserved");
                    self.add_grad(input, dx);
                }
                Op::SumChannels { input } => {
                    let v = self.value(input);
                    let c = v.shape()[3];
                    let mut dx = Tensor::zeros(v.shape());
                    for (dpx, &gp) in dx.data_mut().chunks_exact_mut(c).zip(g.data()) {
                        dpx.fill(gp);
                    }
                    self.add_grad(input, dx);
                }
                Op::Advect { prev, kernels } => {
                    let (dprev, dk) = advect_grads(self.value(prev), self.value(kernels), &g);
                    self.add_grad(prev, dprev);
                    self.add_grad(kernels, dk);
                }
            }
        }
        Ok(())
    }
}

/// Softmax along the fastest axis in groups of `c`, with max-subtraction.
pub(crate) fn softmax_last_axis<T: Scalar>(v: &Tensor<T>, c: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(v.shape());
    for (opx, px) in out
        .data_mut()
        .chunks_exact_mut(c)
        .zip(v.data().chunks_exact(c))
    {
        let m = px.iter().fold(px[0], |acc, &x| acc.maximum(x));
        let mut sum = T::ZERO;
        for (o, &x) in opx.iter_mut().zip(px) {
            *o = (x - m).exp();
            sum += *o;
        }
        for o in opx.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// "Same"-extent correlation of a single-channel frame with each kernel,
/// replicate-padding the edges. `prev` is `[B,H,W,1]`, `kernels` `[m,k,k]`.
pub(crate) fn advect_forward<T: Scalar>(prev: &Tensor<T>, kernels: &Tensor<T>) -> Tensor<T> {
    let (batch, h, w) = (prev.shape()[0], prev.shape()[1], prev.shape()[2]);
    let (m, k) = (kernels.shape()[0], kernels.shape()[1]);
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(&[batch, h, w, m]);
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                for j in 0..m {
                    let mut acc = T::ZERO;
                    for dy in 0..k {
                        let sy = (y as isize + dy as isize - r).clamp(0, h as isize - 1) as usize;
                        for dx in 0..k {
                            let sx =
                                (x as isize + dx as isize - r).clamp(0, w as isize - 1) as usize;
                            acc += kernels.at3(j, dy, dx) * prev.at4(b, sy, sx, 0);
                        }
                    }
                    let idx = out.idx4(b, y, x, j);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

fn advect_grads<T: Scalar>(
    prev: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (batch, h, w) = (prev.shape()[0], prev.shape()[1], prev.shape()[2]);
    let (m, k) = (kernels.shape()[0], kernels.shape()[1]);
    let r = (k / 2) as isize;
    let mut dprev = Tensor::zeros(prev.shape());
    let mut dk = Tensor::zeros(kernels.shape());
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                for j in 0..m {
                    let g = grad_out.at4(b, y, x, j);
                    for dy in 0..k {
                        let sy = (y as isize + dy as isize - r).clamp(0, h as isize - 1) as usize;
                        for dx in 0..k {
                            let sx =
                                (x as isize + dx as isize - r).clamp(0, w as isize - 1) as usize;
                            let pidx = dprev.idx4(b, sy, sx, 0);
                            dprev.data_mut()[pidx] += g * kernels.at3(j, dy, dx);
                            let kidx = dk.idx3(j, dy, dx);
                            dk.data_mut()[kidx] += g * prev.at4(b, sy, sx, 0);
                        }
                    }
                }
            }
        }
    }
    (dprev, dk)
}

/// Finite-difference gradient checking utilities (64-bit mode).
pub mod gradcheck {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of analytic gradients.
    ///
    /// `loss` must rebuild the computation from scratch for the given leaf
    /// values. For each input tensor, up to `samples` coordinates are probed
    /// (all of them when the tensor is small) and the maximum relative error
    /// against `(f(x+ε) − f(x−ε)) / 2ε` is returned.
    pub fn max_rel_error(
        loss: &dyn Fn(&[Tensor<f64>]) -> f64,
        inputs: &[Tensor<f64>],
        analytic: &[Tensor<f64>],
        eps: f64,
        samples: usize,
        seed: u64,
    ) -> f64 {
        assert_eq!(inputs.len(), analytic.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for ti in 0..inputs.len() {
            assert_eq!(inputs[ti].shape(), analytic[ti].shape());
            let n = inputs[ti].numel();
            let mut coords: Vec<usize> = (0..n).collect();
            coords.shuffle(&mut rng);
            coords.truncate(samples.min(n));
            for &ci in &coords {
                let orig = work[ti].data()[ci];
                work[ti].data_mut()[ci] = orig + eps;
                let up = loss(&work);
                work[ti].data_mut()[ci] = orig - eps;
                let down = loss(&work);
                work[ti].data_mut()[ci] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic[ti].data()[ci];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                if err > worst {
                    worst = err;
                }
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rt(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        // keep magnitudes away from relu/max kinks for finite differences
        Tensor::from_fn(shape, |_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }

    #[test]
    fn relu_basics() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let yy = tape.relu(y);
        assert_eq!(tape.value(yy).data(), tape.value(y).data());
    }

    #[test]
    fn concat_channels_layout_and_recovery() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f32));
        let b = tape.leaf(Tensor::from_fn(&[1, 2, 2, 1], |i| 100.0 + i as f32));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 2, 2, 3]);
        // slicing the first Ca channels recovers a exactly
        for px in 0..4 {
            for ch in 0..2 {
                assert_eq!(
                    tape.value(c).data()[px * 3 + ch],
                    tape.value(a).data()[px * 2 + ch]
                );
            }
            assert_eq!(tape.value(c).data()[px * 3 + 2], 100.0 + px as f32);
        }
    }

    #[test]
    fn concat_with_zero_channel_tensor_is_identity() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::from_fn(&[1, 2, 3, 4], |i| i as f32));
        let empty = tape.leaf(Tensor::zeros(&[1, 2, 3, 0]));
        let c = tape.concat_channels(a, empty).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 2, 3, 4]);
        assert_eq!(tape.value(c).data(), tape.value(a).data());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[1, 2, 2, 1]));
        let b = tape.leaf(Tensor::zeros(&[1, 3, 2, 1]));
        let msg = tape.concat_channels(a, b).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 2, 1]") && msg.contains("[1, 3, 2, 1]"), "{msg}");
    }

    #[test]
    fn linear_combine_one_hot_and_mean() {
        let mut tape = Tape::<f32>::new();
        let basis = tape.leaf(Tensor::from_fn(&[1, 2, 2, 3], |i| i as f32));
        let onehot = tape.leaf(Tensor::from_vec(&[3], vec![0.0, 1.0, 0.0]).unwrap());
        let y = tape.linear_combine(basis, onehot).unwrap();
        for px in 0..4 {
            assert_eq!(tape.value(y).data()[px], (px * 3 + 1) as f32);
        }
        let zeros = tape.leaf(Tensor::zeros(&[3]));
        let z = tape.linear_combine(basis, zeros).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));

        let two = tape.leaf(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f32));
        let half = tape.leaf(Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap());
        let mean = tape.linear_combine(two, half).unwrap();
        assert_eq!(tape.value(mean).data(), &[0.5, 2.5]);
    }

    #[test]
    fn softmax_properties() {
        let mut tape = Tape::<f64>::new();
        let uniform = tape.leaf(Tensor::filled(&[1, 2, 2, 4], 3.0));
        let s = tape.softmax_channels(uniform);
        for &v in tape.value(s).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        // saturation
        let mut spike = Tensor::zeros(&[1, 1, 1, 3]);
        spike.data_mut()[1] = 1000.0;
        let sp = tape.leaf(spike);
        let s2 = tape.softmax_channels(sp);
        assert!(tape.value(s2).data()[1] > 1.0 - 1e-9);
        // shift invariance and sums to one
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::from_fn(&[1, 3, 3, 5], |_| rng.gen_range(-2.0..2.0));
        let shifted = x.map(|v| v + 7.5);
        let xa = tape.leaf(x);
        let xb = tape.leaf(shifted);
        let (sa, sb) = (tape.softmax_channels(xa), tape.softmax_channels(xb));
        for (a, b) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            assert!((a - b).abs() < 1e-6);
        }
        for px in tape.value(sa).data().chunks_exact(5) {
            let sum: f64 = px.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mse_loss_values() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::filled(&[2, 3], 0.4));
        let b = tape.leaf(Tensor::filled(&[2, 3], 0.4));
        let l = tape.mse_loss(a, b).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
        let c = tape.leaf(Tensor::filled(&[2, 3], 0.5));
        let l2 = tape.mse_loss(a, c).unwrap();
        assert!((tape.value(l2).data()[0] - 0.01).abs() < 1e-7);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let y = tape.relu(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn backward_fan_out_sums_paths() {
        // f(w) = w + w via mul by ones twice → grad 2
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::scalar(3.0));
        let ones = tape.leaf(Tensor::scalar(1.0));
        let a = tape.mul_elem(w, ones).unwrap();
        let b = tape.mul_elem(w, ones).unwrap();
        let two = tape.leaf(Tensor::scalar(0.0));
        // sum = mse-free path: (a+b) via add_row_bias is rank-2 only; use mse trick:
        // loss = mse(a+b-ish)... simpler: loss = mse(concat? ) — use mul and sum:
        let _ = two;
        // loss = mean((a - (-b))²) is awkward; instead: s = a·1 + b·1 through
        // matmul on [1,1] matrices: s = a@1 then add via mul? Use mse(a, -b):
        // mse(a, -b) = (a+b)² for scalars.
        let neg_b = tape.mul_elem(b, ones).unwrap();
        let minus_one = tape.leaf(Tensor::scalar(-1.0));
        let nb = tape.mul_elem(neg_b, minus_one).unwrap();
        let loss = tape.mse_loss(a, nb).unwrap();
        // loss = (w + w)² = 4w² → dloss/dw = 8w = 24
        tape.backward(loss).unwrap();
        let gw = tape.grad(w).unwrap().data()[0];
        assert!((gw - 24.0).abs() < 1e-9, "grad {gw}");
    }

    #[test]
    fn backward_leaves_unreachable_nodes_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let unused = tape.leaf(Tensor::scalar(5.0));
        let loss = tape.mse_loss(x, x).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn simple_linear_gradient() {
        // loss = mean((w·x − t)²), x constant
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.5, -0.25]).unwrap());
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let t = tape.leaf(Tensor::zeros(&[1, 3]));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.mse_loss(y, t).unwrap();
        tape.backward(loss).unwrap();
        // y = [0.5·1−0.25·4, 0.5·2−0.25·5, 0.5·3−0.25·6] = [−0.5, −0.25, 0]
        // dL/dy = 2y/3; dL/dw = dL/dy @ x^T
        let gy = [-1.0 / 3.0, -1.0 / 6.0, 0.0];
        let want0: f64 = gy[0] * 1.0 + gy[1] * 2.0 + gy[2] * 3.0;
        let want1: f64 = gy[0] * 4.0 + gy[1] * 5.0 + gy[2] * 6.0;
        let gw = tape.grad(w).unwrap();
        assert!((gw.data()[0] - want0).abs() < 1e-12);
        assert!((gw.data()[1] - want1).abs() < 1e-12);
    }

    #[test]
    fn tile_action_constant_planes_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape
            .leaf(Tensor::from_vec(&[1, 3], vec![1.0, -1.0, 0.5]).unwrap());
        let tiled = tape.tile_action(a, 10, 20).unwrap();
        assert_eq!(tape.value(tiled).shape(), &[1, 10, 20, 3]);
        for px in tape.value(tiled).data().chunks_exact(3) {
            assert_eq!(px, &[1.0, -1.0, 0.5]);
        }
        // gradient of mean-square loss w.r.t. action channel = sum over pixels
        let target = tape.leaf(Tensor::zeros(&[1, 10, 20, 3]));
        let loss = tape.mse_loss(tiled, target).unwrap();
        tape.backward(loss).unwrap();
        let ga = tape.grad(a).unwrap();
        // d/da_c mean(tiled²) = Σ_px 2·a_c/N = 200·2·a_c/600
        for (c, &want) in [1.0, -1.0, 0.5].iter().enumerate() {
            let expect = 200.0 * 2.0 * want / 600.0;
            assert!((ga.data()[c] - expect).abs() < 1e-12);
        }
    }

    /// Runs one forward+backward pass and FD-checks every leaf of `build`.
    ///
    /// `build` records the graph on the given tape over the supplied leaf ids
    /// and returns the scalar loss node.
    fn fd_check(
        inputs: Vec<Tensor<f64>>,
        samples: usize,
        build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
    ) {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss_node = build(&mut tape, &ids);
        tape.backward(loss_node).unwrap();
        let analytic: Vec<Tensor<f64>> = ids
            .iter()
            .zip(&inputs)
            .map(|(&id, input)| {
                tape.grad(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(input.shape()))
            })
            .collect();
        let loss_fn = |vals: &[Tensor<f64>]| -> f64 {
            let mut t = Tape::<f64>::new();
            let ids: Vec<NodeId> = vals.iter().map(|v| t.leaf(v.clone())).collect();
            let l = build(&mut t, &ids);
            t.value(l).data()[0]
        };
        let err = gradcheck::max_rel_error(&loss_fn, &inputs, &analytic, 1e-5, samples, 17);
        assert!(err < 1e-3, "max relative FD error {err}");
    }

    #[test]
    fn conv_deconv_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let inputs = vec![
            rt(&[2, 8, 8, 3], &mut rng),  // x
            rt(&[3, 3, 3, 4], &mut rng),  // conv weight
            rt(&[4], &mut rng),           // conv bias
            rt(&[4, 4, 4, 2], &mut rng),  // deconv weight
            rt(&[2], &mut rng),           // deconv bias
            rt(&[2, 8, 8, 2], &mut rng),  // target
        ];
        fd_check(inputs, 40, |tape, ids| {
            let c = tape.conv2d(ids[0], ids[1], ids[2], 2, 1).unwrap(); // [2,4,4,4]
            let r = tape.relu(c);
            let d = tape.deconv2d(r, ids[3], ids[4], 2, 1).unwrap(); // [2,8,8,2]
            tape.mse_loss(d, ids[5]).unwrap()
        });
    }

    #[test]
    fn tile_concat_combine_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![
            rt(&[2, 4, 4, 2], &mut rng), // features
            rt(&[2, 3], &mut rng),       // action
            rt(&[5], &mut rng),          // combine weights
            rt(&[2, 4, 4, 1], &mut rng), // target
        ];
        fd_check(inputs, 40, |tape, ids| {
            let tiled = tape.tile_action(ids[1], 4, 4).unwrap();
            let cat = tape.concat_channels(ids[0], tiled).unwrap(); // [2,4,4,5]
            let y = tape.linear_combine(cat, ids[2]).unwrap();
            tape.mse_loss(y, ids[3]).unwrap()
        });
    }

    #[test]
    fn fc_gate_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let inputs = vec![
            rt(&[2, 6], &mut rng),  // x
            rt(&[6, 4], &mut rng),  // w1
            rt(&[4], &mut rng),     // b1
            rt(&[6, 4], &mut rng),  // gate map
            rt(&[2, 4], &mut rng),  // target
        ];
        fd_check(inputs, 40, |tape, ids| {
            let h = tape.matmul(ids[0], ids[1]).unwrap();
            let hb = tape.add_row_bias(h, ids[2]).unwrap();
            let g = tape.matmul(ids[0], ids[3]).unwrap();
            let gated = tape.mul_elem(hb, g).unwrap();
            let re = tape.reshape(gated, &[2, 2, 1, 2]).unwrap();
            let sm = tape.softmax_channels(re);
            let flat = tape.reshape(sm, &[2, 4]).unwrap();
            tape.mse_loss(flat, ids[4]).unwrap()
        });
    }

    #[test]
    fn advect_sum_channels_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let inputs = vec![
            rt(&[1, 5, 6, 1], &mut rng), // prev frame
            rt(&[2, 3, 3], &mut rng),    // kernels
            rt(&[1, 5, 6, 1], &mut rng), // target
        ];
        fd_check(inputs, 40, |tape, ids| {
            let adv = tape.advect(ids[0], ids[1]).unwrap(); // [1,5,6,2]
            let sum = tape.sum_channels(adv).unwrap();
            tape.mse_loss(sum, ids[2]).unwrap()
        });
    }
}
