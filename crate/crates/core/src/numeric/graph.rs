//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse and accumulates adjoints into the nodes that
//! need them. Parameters enter through [`Graph::param`]; parameters of a
//! frozen store, or any parameter on an inference graph, enter as plain
//! constants and therefore never receive a gradient.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom, GroupNormCache};
use super::{Gradient, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    /// `x[n, c, ..] + b[n, c]`
    AddPerSampleChannel(NodeId, NodeId),
    /// `x[n, i] @ w[o, i]^T + b[o]`
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Upsample2(NodeId),
    ConcatChannels(NodeId, NodeId),
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        cache: Option<GroupNormCache<T>>,
    },
    Silu(NodeId),
    Tanh(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MseLoss(NodeId, NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, NodeId)>,
    training: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// Graph that tracks gradients of trainable parameters.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            training: true,
        }
    }

    /// Graph on which every parameter is a constant. Backward caches are
    /// skipped, so this is the cheap path for sampling and evaluation.
    pub fn inference() -> Self {
        Graph {
            training: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; never differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable free input, used for gradient checks of single ops.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let value = store.get(id).clone();
        if self.training && !store.is_frozen() {
            let node = self.push(value, Op::Leaf, true);
            self.params.push((id, node));
            node
        } else {
            self.constant(value)
        }
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        self.value(a).same_shape(self.value(b), op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let s = T::from_f64(s);
        let v = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// Adds `b[n, c]` to every spatial position of `x[n, c, ...]`.
    pub fn add_per_sample_channel(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if xs.len() < 2 || bs.len() != 2 || xs[0] != bs[0] || xs[1] != bs[1] {
            return Err(Error::shape("add_per_sample_channel", xs, bs));
        }
        let inner: usize = xs[2..].iter().product();
        let mut v = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for (i, chunk) in v.data_mut().chunks_exact_mut(inner).enumerate() {
            let add = bv[i];
            chunk.iter_mut().for_each(|e| *e = *e + add);
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(v, Op::AddPerSampleChannel(x, b), ng))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(Error::shape("linear", xs, ws));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            n,
            i,
            o,
            T::one(),
            self.value(x).data(),
            i as isize,
            1,
            self.value(w).data(),
            1,
            i as isize,
            T::one(),
            &mut out,
            o as isize,
            1,
        );
        let v = Tensor::new(&[n, o], out)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(v, Op::Linear { x, w, b }, ng))
    }

    /// 2-D convolution of `x[n, ci, h, w]` with `w[co, ci, k, k]` and bias `b[co]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || bs != [ws[0]] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[2] {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel {} does not fit input {:?} with pad {pad}",
                ws[2], xs
            )));
        }
        let geom = ConvGeom {
            n: xs[0],
            ci: xs[1],
            h: xs[2],
            w: xs[3],
            co: ws[0],
            k: ws[2],
            stride,
            pad,
            ho: (xs[2] + 2 * pad - ws[2]) / stride + 1,
            wo: (xs[3] + 2 * pad - ws[2]) / stride + 1,
        };
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        let keep_cols = ng && self.needs(w);
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
            keep_cols,
        );
        let v = Tensor::new(&[geom.n, geom.co, geom.ho, geom.wo], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, geom, cols }, ng))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("upsample2", &xs, &[0, 0, 0, 0]));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); nc * 4 * h * w];
        for p in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let v = Tensor::new(&[xs[0], xs[1], 2 * h, 2 * w], out)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::Upsample2(x), ng))
    }

    /// Concatenate `[n, ca, ...]` and `[n, cb, ...]` along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() < 2 || as_.len() != bs.len() || as_[0] != bs[0] || as_[2..] != bs[2..] {
            return Err(Error::shape("concat_channels", as_, bs));
        }
        let n = as_[0];
        let inner: usize = as_[2..].iter().product();
        let (la, lb) = (as_[1] * inner, bs[1] * inner);
        let mut shape = as_.to_vec();
        shape[1] += bs[1];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (la + lb));
        for i in 0..n {
            out.extend_from_slice(&av[i * la..(i + 1) * la]);
            out.extend_from_slice(&bv[i * lb..(i + 1) * lb]);
        }
        let v = Tensor::new(&shape, out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::ConcatChannels(a, b), ng))
    }

    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let c = *xs.get(1).ok_or_else(|| Error::shape("group_norm", &xs, &[]))?;
        if xs.len() < 2 || groups == 0 || c % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group_norm", &xs, self.shape(gamma)));
        }
        let hw: usize = xs[2..].iter().product();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let (y, cache) = kernels::group_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            xs[0],
            c,
            hw,
            groups,
            ng,
        );
        let v = Tensor::new(&xs, y)?;
        let cache = ng.then_some(cache);
        Ok(self.push(
            v,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                cache,
            },
            ng,
        ))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a / (T::one() + (-a).exp()));
        let ng = self.needs(x);
        self.push(v, Op::Silu(x), ng)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.tanh());
        let ng = self.needs(x);
        self.push(v, Op::Tanh(x), ng)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a * a);
        let ng = self.needs(x);
        self.push(v, Op::Square(x), ng)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(v, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).mean());
        let ng = self.needs(x);
        self.push(v, Op::Mean(x), ng)
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mse_loss")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = T::from_f64(av.len() as f64);
        let s: T = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(s / n), Op::MseLoss(a, b), ng))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape(), vec![T::one()])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        Ok(Grads {
            nodes: grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) -> Result<()> {
        if !self.needs(id) {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(acc) => {
                acc.same_shape(&g, "accumulate")?;
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::AddPerSampleChannel(x, b) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.needs(*b) {
                    let bs = self.shape(*b).to_vec();
                    let inner = g.len() / (bs[0] * bs[1]);
                    let db: Vec<T> = g.data().chunks_exact(inner).map(|c| c.iter().copied().sum()).collect();
                    self.accumulate(grads, *b, Tensor::new(&bs, db)?)?;
                }
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x).to_vec(), self.shape(*w).to_vec());
                let (n, i, o) = (xs[0], xs[1], ws[0]);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * i];
                    T::gemm(
                        n,
                        o,
                        i,
                        T::one(),
                        g.data(),
                        o as isize,
                        1,
                        self.value(*w).data(),
                        i as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        i as isize,
                        1,
                    );
                    self.accumulate(grads, *x, Tensor::new(&xs, dx)?)?;
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); o * i];
                    T::gemm(
                        o,
                        n,
                        i,
                        T::one(),
                        g.data(),
                        1,
                        o as isize,
                        self.value(*x).data(),
                        i as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        i as isize,
                        1,
                    );
                    self.accumulate(grads, *w, Tensor::new(&ws, dw)?)?;
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); o];
                    for row in g.data().chunks_exact(o) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&[o], db)?)?;
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let need = (self.needs(*x), self.needs(*w), self.needs(*b));
                let cg = kernels::conv2d_backward(g.data(), self.value(*w).data(), cols, geom, need);
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?)?;
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w), dw)?)?;
                }
                if let Some(db) = cg.db {
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b), db)?)?;
                }
            }
            Op::Upsample2(x) => {
                let xs = self.shape(*x).to_vec();
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let mut dx = vec![T::zero(); nc * h * w];
                let gd = g.data();
                for p in 0..nc {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let d = &mut dx[(p * h + y / 2) * w + xx / 2];
                            *d = *d + gd[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&xs, dx)?)?;
            }
            Op::ConcatChannels(a, b) => {
                let (as_, bs) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let inner: usize = as_[2..].iter().product();
                let (la, lb) = (as_[1] * inner, bs[1] * inner);
                let mut da = Vec::with_capacity(as_[0] * la);
                let mut db = Vec::with_capacity(as_[0] * lb);
                for chunk in g.data().chunks_exact(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                self.accumulate(grads, *a, Tensor::new(&as_, da)?)?;
                self.accumulate(grads, *b, Tensor::new(&bs, db)?)?;
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                cache,
            } => {
                let cache = cache.as_ref().expect("group_norm cache on a tracked node");
                let xs = self.shape(*x).to_vec();
                let hw: usize = xs[2..].iter().product();
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(
                    g.data(),
                    self.value(*gamma).data(),
                    cache,
                    xs[0],
                    xs[1],
                    hw,
                    *groups,
                );
                self.accumulate(grads, *x, Tensor::new(&xs, dx)?)?;
                self.accumulate(grads, *gamma, Tensor::new(&[xs[1]], dgamma)?)?;
                self.accumulate(grads, *beta, Tensor::new(&[xs[1]], dbeta)?)?;
            }
            Op::Silu(x) => {
                let d = g.zip_with(self.value(*x), "silu", |gi, a| {
                    let s = T::one() / (T::one() + (-a).exp());
                    gi * s * (T::one() + a * (T::one() - s))
                })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Tanh(x) => {
                let d = g.zip_with(&node.value, "tanh", |gi, y| gi * (T::one() - y * y))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Square(x) => {
                let two = T::from_f64(2.0);
                let d = g.zip_with(self.value(*x), "square", |gi, a| two * gi * a)?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Sum(x) => {
                let d = Tensor::full(self.shape(*x), g.item())?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Mean(x) => {
                let n = T::from_f64(self.value(*x).len() as f64);
                let d = Tensor::full(self.shape(*x), g.item() / n)?;
                self.accumulate(grads, *x, d)?;
            }
            Op::MseLoss(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = T::from_f64(2.0) * g.item() / T::from_f64(av.len() as f64);
                let d = av.zip_with(bv, "mse_loss", |x, y| c * (x - y))?;
                if self.needs(*b) {
                    self.accumulate(grads, *b, d.scale(-T::one()))?;
                }
                self.accumulate(grads, *a, d)?;
            }
        }
        Ok(())
    }
}

/// Result of a reverse sweep.
pub struct Grads<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, NodeId)>,
}

impl<T: Real> Grads<T> {
    /// Adjoint of an arbitrary node, if it was reached.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }

    /// Flat gradient of one parameter store, or `None` when no trainable
    /// parameter of that store took part in the graph (frozen models land
    /// here).
    pub fn for_store(&self, store: &ParamStore<T>) -> Option<Gradient<T>> {
        let mine: Vec<_> = self.params.iter().filter(|(p, _)| p.store == store.id()).collect();
        if mine.is_empty() {
            return None;
        }
        let mut offsets = HashMap::new();
        let mut off = 0;
        for (i, b) in store.blocks().iter().enumerate() {
            offsets.insert(i, off);
            off += b.value.len();
        }
        let mut out = Gradient::zeros_for(store);
        for (pid, node) in mine {
            if let Some(g) = self.wrt(*node) {
                let o = offsets[&pid.index];
                for (d, &v) in out.data[o..o + g.len()].iter_mut().zip(g.data()) {
                    *d = *d + v;
                }
            }
        }
        Some(out)
    }
}
