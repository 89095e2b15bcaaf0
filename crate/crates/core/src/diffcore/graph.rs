//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op as it executes. [`Graph::backward`] walks
//! the tape in reverse and accumulates adjoints into the nodes that asked
//! for them. Leaves created with `requires_grad = false` (and everything
//! computed purely from them) are skipped on the way back.

use super::kernels::{self, ConvGeometry};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Relu {
        x: Var,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
        out_channels: usize,
        cols: Vec<Vec<T>>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    /// Scalar output with precomputed partials with respect to each input.
    Fused {
        inputs: Vec<Var>,
        partials: Vec<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    per_example: Option<Vec<T>>,
}

/// Recording of one forward computation.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// influence the root through differentiable paths.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            per_example: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Per-example loss values attached by a fused loss op, if any.
    pub fn per_example(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].per_example.as_deref()
    }

    /// `[n,m] x [m,p] -> [n,p]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                name: "matmul rhs".into(),
                expected: vec![sa.get(1).copied().unwrap_or(0), sb.get(1).copied().unwrap_or(0)],
                actual: sb.to_vec(),
            });
        }
        let (n, m, p) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), n, m, p);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, p], out)?, Op::MatMul { a, b }, rg))
    }

    /// Adds `bias[p]` to every row of `x[n,p]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let p = *xs.last().unwrap_or(&0);
        if xs.len() != 2 {
            return Err(Error::ShapeMismatch {
                name: "add_bias input".into(),
                expected: vec![xs.first().copied().unwrap_or(0), p],
                actual: xs,
            });
        }
        self.value(bias).expect_shape("bias", &[p])?;
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(p) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o = *o + bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Stride-1 zero-padded ("same") convolution of `x[B,C,H,W]` with
    /// `weight[O,C,k,k]` plus `bias[O]`; `k` must be odd.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch {
                name: "conv2d input".into(),
                expected: vec![0, 0, 0, 0],
                actual: xs,
            });
        }
        if ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::ShapeMismatch {
                name: "conv2d weight".into(),
                expected: vec![ws.first().copied().unwrap_or(0), xs[1], 3, 3],
                actual: ws,
            });
        }
        let out_channels = ws[0];
        self.value(bias).expect_shape("conv2d bias", &[out_channels])?;
        let g = ConvGeometry {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
        };
        let (batch, hw, plen) = (xs[0], g.positions(), g.patch_len());
        let wdata = self.value(weight).data();
        let bdata = self.value(bias).data();
        let xdata = self.value(x).data();
        let mut out = vec![T::zero(); batch * out_channels * hw];
        let mut cols = Vec::with_capacity(batch);
        for b in 0..batch {
            let sample = &xdata[b * g.channels * hw..(b + 1) * g.channels * hw];
            let c = kernels::im2col(sample, &g);
            // [hw, O]
            let prod = kernels::matmul_nt(&c, wdata, hw, plen, out_channels);
            let dst = &mut out[b * out_channels * hw..(b + 1) * out_channels * hw];
            for pos in 0..hw {
                for o in 0..out_channels {
                    dst[o * hw + pos] = prod[pos * out_channels + o] + bdata[o];
                }
            }
            cols.push(c);
        }
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        let value = Tensor::new(vec![batch, out_channels, g.height, g.width], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                weight,
                bias,
                geometry: g,
                out_channels,
                cols,
            },
            rg,
        ))
    }

    /// 2x2 stride-2 max pooling over `[B,C,H,W]` (odd trailing rows/columns dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::ShapeMismatch {
                name: "max_pool2 input".into(),
                expected: vec![0, 0, 2, 2],
                actual: xs,
            });
        }
        let (v, argmax) = kernels::max_pool2(self.value(x).data(), xs[0], xs[1], xs[2], xs[3]);
        let value = Tensor::new(vec![xs[0], xs[1], xs[2] / 2, xs[3] / 2], v)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// `[B, ...] -> [B, prod(...)]`
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = vec![v.rows(), v.row_len()];
        self.reshape(x, shape)
    }

    /// Records a scalar computed outside the graph from `inputs`, together
    /// with its partial derivative with respect to each input.
    pub fn fused_scalar(
        &mut self,
        inputs: &[Var],
        value: T,
        partials: Vec<Tensor<T>>,
        per_example: Option<Vec<T>>,
    ) -> Result<Var> {
        if inputs.len() != partials.len() {
            return Err(Error::ShapeMismatch {
                name: "fused partials".into(),
                expected: vec![inputs.len()],
                actual: vec![partials.len()],
            });
        }
        for (i, (&v, p)) in inputs.iter().zip(&partials).enumerate() {
            p.expect_shape(&format!("fused partial {i}"), self.value(v).shape())?;
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let out = self.push(
            Tensor::scalar(value),
            Op::Fused {
                inputs: inputs.to_vec(),
                partials,
            },
            rg,
        );
        self.nodes[out.0].per_example = per_example;
        Ok(out)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::ShapeMismatch {
                name: "backward root".into(),
                expected: vec![1],
                actual: self.value(root).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(up) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(up);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (n, m, p) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    if self.rg(*a) {
                        let d = kernels::matmul_nt(up.data(), vb.data(), n, p, m);
                        accumulate(&mut grads, *a, Tensor::new(vec![n, m], d)?);
                    }
                    if self.rg(*b) {
                        let d = kernels::matmul_tn(va.data(), up.data(), n, m, p);
                        accumulate(&mut grads, *b, Tensor::new(vec![m, p], d)?);
                    }
                }
                Op::AddBias { x, bias } => {
                    if self.rg(*bias) {
                        let p = self.value(*bias).len();
                        let mut db = vec![T::zero(); p];
                        for row in up.data().chunks(p) {
                            for (d, &u) in db.iter_mut().zip(row) {
                                *d = *d + u;
                            }
                        }
                        accumulate(&mut grads, *bias, Tensor::new(vec![p], db)?);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, up);
                    }
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let mut d = up;
                    for (g, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                        if v <= T::zero() {
                            *g = T::zero();
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Conv2d {
                    x,
                    weight,
                    bias,
                    geometry,
                    out_channels,
                    cols,
                } => {
                    let (o, hw, plen) = (*out_channels, geometry.positions(), geometry.patch_len());
                    let batch = cols.len();
                    let ud = up.data();
                    if self.rg(*bias) {
                        let mut db = vec![T::zero(); o];
                        for b in 0..batch {
                            for (c, d) in db.iter_mut().enumerate() {
                                let s = &ud[(b * o + c) * hw..(b * o + c + 1) * hw];
                                for &v in s {
                                    *d = *d + v;
                                }
                            }
                        }
                        accumulate(&mut grads, *bias, Tensor::new(vec![o], db)?);
                    }
                    if self.rg(*weight) {
                        let mut dw = vec![T::zero(); o * plen];
                        for (b, c) in cols.iter().enumerate() {
                            let dout = &ud[b * o * hw..(b + 1) * o * hw];
                            let part = kernels::matmul(dout, c, o, hw, plen);
                            for (d, v) in dw.iter_mut().zip(part) {
                                *d = *d + v;
                            }
                        }
                        let shape = self.value(*weight).shape().to_vec();
                        accumulate(&mut grads, *weight, Tensor::new(shape, dw)?);
                    }
                    if self.rg(*x) {
                        let wdata = self.value(*weight).data();
                        let per = geometry.channels * hw;
                        let mut dx = vec![T::zero(); batch * per];
                        for b in 0..batch {
                            let dout = &ud[b * o * hw..(b + 1) * o * hw];
                            let dcols = kernels::matmul_tn(dout, wdata, o, hw, plen);
                            kernels::col2im_add(&dcols, geometry, &mut dx[b * per..(b + 1) * per]);
                        }
                        let shape = self.value(*x).shape().to_vec();
                        accumulate(&mut grads, *x, Tensor::new(shape, dx)?);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let shape = self.value(*x).shape().to_vec();
                    let mut dx = Tensor::zeros(shape);
                    let dd = dx.data_mut();
                    for (&src, &u) in argmax.iter().zip(up.data()) {
                        dd[src] = dd[src] + u;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Reshape { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, up.reshape(shape)?);
                }
                Op::Fused { inputs, partials } => {
                    let s = up.data()[0];
                    for (&v, p) in inputs.iter().zip(partials) {
                        if self.rg(v) {
                            accumulate(&mut grads, v, p.map(|d| d * s));
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Smallest distance from a non-differentiable point over all ReLU
    /// inputs and max-pool windows recorded on the tape. Gradient checks use
    /// it to avoid finite-difference steps that straddle a kink.
    pub fn kink_margin(&self) -> Option<T> {
        let mut best: Option<T> = None;
        let mut note = |m: T| {
            best = Some(match best {
                Some(b) if b <= m => b,
                _ => m,
            });
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in self.value(*x).data() {
                        note(v.abs());
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let xs = self.value(*x).shape();
                    let (h, w) = (xs[2], xs[3]);
                    let data = self.value(*x).data();
                    for &a in argmax {
                        let plane = a / (h * w);
                        let (y, xx) = ((a % (h * w)) / w / 2 * 2, (a % (h * w)) % w / 2 * 2);
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let at = plane * h * w + (y + dy) * w + xx + dx;
                            // two exact zeros are a flat ReLU floor, not a switch
                            if at != a && !(data[a] == T::zero() && data[at] == T::zero()) {
                                note(data[a] - data[at]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        best
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + *d;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
