//! Reverse-mode automatic differentiation over an append-only node arena.
//!
//! Nodes are pushed in evaluation order, so the arena index order is already
//! a topological order and `backward` walks it in reverse. A fresh graph is
//! built for every forward pass; parameters enter as leaves (see
//! [`crate::params::Binder`]) and their gradients are read back by handle.

use crate::error::{input, Result};
use crate::ops::{self, ConvGeom};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Concat { xs: Vec<Var> },
    AddPrefix { xs: Vec<Var> },
    Upsample2x { x: Var },
    SpaceToDepth { x: Var },
    MaxPool { x: Var, arg: Vec<usize> },
    Silu { x: Var },
    SampleNorm { x: Var, inv: Vec<T> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    MulScalarVar { x: Var, v: Var, index: usize },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    AddConst { x: Var },
    StraightThrough { relaxed: Var },
    MaskedMix { theta: Var, alpha: Var, masks: Vec<[T; 25]> },
    Narrow { x: Var, dim: usize, start: usize },
    Sum { x: Var },
    Dot { x: Var, c: Tensor<T> },
    /// Scalar output whose local gradients were computed during the forward pass.
    Fused { xs: Vec<Var>, local: Vec<Tensor<T>> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn silu<T: Real>(v: T) -> T {
    v * ops::sigmoid(v)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
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

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any
    /// gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&vals)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }, rg))
    }

    /// Sum of tensors whose channel counts may differ; each input is added
    /// into the leading channels of the result, whose width is the largest
    /// input width.
    pub fn add_prefix(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| input("add_prefix of zero tensors"))?;
        let s0 = self.shape(first);
        let mut width = 0;
        for &v in xs {
            let s = self.shape(v);
            if s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(input(format!("add_prefix: {:?} does not align with {:?}", s, s0)));
            }
            width = width.max(s[1]);
        }
        let mut out = Tensor::zeros([s0[0], width, s0[2], s0[3]]);
        for &v in xs {
            out.accumulate_block(1, 0, &self.nodes[v.0].value);
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::AddPrefix { xs: xs.to_vec() }, rg))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let out = ops::upsample_nearest2x(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Upsample2x { x }, rg)
    }

    pub fn space_to_depth(&mut self, x: Var) -> Result<Var> {
        let out = ops::space_to_depth(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SpaceToDepth { x }, rg))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let (out, arg) = ops::maxpool2d(self.value(x), k, stride, padding)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool { x, arg }, rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(silu);
        let rg = self.rg(x);
        self.push(out, Op::Silu { x }, rg)
    }

    /// Per-sample normalisation over `C × H × W`, without learned scale or shift.
    pub fn sample_norm(&mut self, x: Var) -> Var {
        let (out, inv) = ops::sample_norm(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::SampleNorm { x, inv }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(input(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.axpy(T::one(), vb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(input(format!("mul: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, s }, rg)
    }

    /// `x * v[index]` where `v` is a vector node.
    pub fn mul_scalar_var(&mut self, x: Var, v: Var, index: usize) -> Result<Var> {
        let vv = self.value(v);
        if index >= vv.numel() {
            return Err(input(format!("mul_scalar_var: index {} of {} entries", index, vv.numel())));
        }
        let s = vv.data()[index];
        let out = self.value(x).map(|e| e * s);
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(out, Op::MulScalarVar { x, v, index }, rg))
    }

    /// Softmax over every element of `x` (used on architecture vectors).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape(), ops::softmax(vx.data())?)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape(), ops::log_softmax(vx.data())?)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax { x }, rg))
    }

    /// `x + c` for a constant `c` that receives no gradient.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.axpy(T::one(), c)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::AddConst { x }, rg))
    }

    /// Forward value `hard`, backward identity into `relaxed`:
    /// `relaxed + stop_gradient(hard - relaxed)`.
    pub fn straight_through(&mut self, relaxed: Var, hard: Tensor<T>) -> Result<Var> {
        if hard.shape() != self.shape(relaxed) {
            return Err(input("straight_through: hard and relaxed shapes differ"));
        }
        let rg = self.rg(relaxed);
        Ok(self.push(hard, Op::StraightThrough { relaxed }, rg))
    }

    /// `theta ⊙ Σ_k alpha_k · masks_k`, with every mask a 5x5 spatial pattern
    /// broadcast over the filter and input-channel axes of `theta`.
    pub fn masked_mix(&mut self, theta: Var, alpha: Var, masks: Vec<[T; 25]>) -> Result<Var> {
        let th = self.value(theta);
        let al = self.value(alpha);
        let s = th.shape();
        if s[2] != 5 || s[3] != 5 {
            return Err(input(format!("masked_mix needs a 5x5 bank, got {:?}", s)));
        }
        if al.numel() != masks.len() {
            return Err(input(format!(
                "masked_mix: {} weights for {} candidates",
                al.numel(),
                masks.len()
            )));
        }
        let coef = mix_coefficients(al.data(), &masks);
        let mut out = th.clone();
        for chunk in out.data_mut().chunks_mut(25) {
            for (v, &c) in chunk.iter_mut().zip(coef.iter()) {
                *v *= c;
            }
        }
        let rg = self.rg(theta) || self.rg(alpha);
        Ok(self.push(out, Op::MaskedMix { theta, alpha, masks }, rg))
    }

    /// Sub-block `[start, start+len)` of axis `dim`; gradient flows back into
    /// the block only.
    pub fn narrow(&mut self, x: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start == 0 && len == s.get(dim).copied().unwrap_or(0) {
            return Ok(x);
        }
        let out = self.value(x).narrow(dim, start, len)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Narrow { x, dim, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).sum_f64();
        let rg = self.rg(x);
        self.push(Tensor::scalar(T::c(s)), Op::Sum { x }, rg)
    }

    /// `Σ x ⊙ c` for a constant `c`, as a scalar.
    pub fn dot(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != c.shape() {
            return Err(input(format!("dot: {:?} vs {:?}", vx.shape(), c.shape())));
        }
        let s: f64 = vx.data().iter().zip(c.data()).map(|(a, b)| a.f64() * b.f64()).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(T::c(s)), Op::Dot { x, c }, rg))
    }

    /// Registers a scalar computed outside the graph together with its
    /// gradients with respect to `xs`.
    pub(crate) fn fused_scalar(&mut self, value: T, xs: Vec<Var>, local: Vec<Tensor<T>>) -> Var {
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(Tensor::scalar(value), Op::Fused { xs, local }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Gradients from earlier sweeps are
    /// discarded; within one sweep they accumulate over every use of a node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(input(format!("backward needs a scalar loss, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Tensor<T>| -> Result<()> {
            match &mut grads[v.0] {
                Some(e) => e.axpy(T::one(), &d),
                slot @ None => {
                    *slot = Some(d);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let need = (rg(*x), rg(*w), b.is_some_and(rg));
                let cg = ops::conv2d_backward(self.value(*x), self.value(*w), g, *geom, need)?;
                if let Some(dx) = cg.dx {
                    acc(*x, dx)?;
                }
                if let Some(dw) = cg.dw {
                    acc(*w, dw)?;
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    let shape = self.shape(*b);
                    acc(*b, db.reshape(shape)?)?;
                }
            }
            Op::Concat { xs } => {
                let mut start = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if rg(x) {
                        acc(x, g.narrow(1, start, c)?)?;
                    }
                    start += c;
                }
            }
            Op::AddPrefix { xs } => {
                for &x in xs {
                    if rg(x) {
                        acc(x, g.narrow(1, 0, self.shape(x)[1])?)?;
                    }
                }
            }
            Op::Upsample2x { x } => acc(*x, ops::upsample_nearest2x_backward(g))?,
            Op::SpaceToDepth { x } => acc(*x, ops::space_to_depth_backward(g))?,
            Op::MaxPool { x, arg } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (&src, &gv) in arg.iter().zip(g.data()) {
                    dx.data_mut()[src] += gv;
                }
                acc(*x, dx)?;
            }
            Op::Silu { x } => {
                let vx = self.value(*x);
                let data = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        let s = ops::sigmoid(v);
                        gv * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                acc(*x, Tensor::new(vx.shape(), data)?)?;
            }
            Op::SampleNorm { x, inv } => {
                let dx = ops::sample_norm_backward(&self.nodes[i].value, inv, g);
                acc(*x, dx)?;
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    acc(*a, g.clone())?;
                }
                if rg(*b) {
                    acc(*b, g.clone())?;
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if rg(*a) {
                    let d = vb.data().iter().zip(g.data()).map(|(&q, &gv)| q * gv).collect();
                    acc(*a, Tensor::new(va.shape(), d)?)?;
                }
                if rg(*b) {
                    let d = va.data().iter().zip(g.data()).map(|(&p, &gv)| p * gv).collect();
                    acc(*b, Tensor::new(vb.shape(), d)?)?;
                }
            }
            Op::Scale { x, s } => acc(*x, g.map(|v| v * *s))?,
            Op::MulScalarVar { x, v, index } => {
                let vv = self.value(*v);
                if rg(*x) {
                    let s = vv.data()[*index];
                    acc(*x, g.map(|e| e * s))?;
                }
                if rg(*v) {
                    let dot: f64 = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(a, b)| a.f64() * b.f64())
                        .sum();
                    let mut dv = Tensor::zeros(vv.shape());
                    dv.data_mut()[*index] = T::c(dot);
                    acc(*v, dv)?;
                }
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let inner: T = y.data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum();
                let d = y.data().iter().zip(g.data()).map(|(&yv, &gv)| yv * (gv - inner)).collect();
                acc(*x, Tensor::new(y.shape(), d)?)?;
            }
            Op::LogSoftmax { x } => {
                let p = ops::softmax(self.value(*x).data())?;
                let gs: T = g.data().iter().copied().sum();
                let d = p.iter().zip(g.data()).map(|(&pv, &gv)| gv - pv * gs).collect();
                acc(*x, Tensor::new(g.shape(), d)?)?;
            }
            Op::AddConst { x } => acc(*x, g.clone())?,
            Op::StraightThrough { relaxed } => acc(*relaxed, g.clone())?,
            Op::MaskedMix { theta, alpha, masks } => {
                let th = self.value(*theta);
                if rg(*theta) {
                    let coef = mix_coefficients(self.value(*alpha).data(), masks);
                    let mut d = g.clone();
                    for chunk in d.data_mut().chunks_mut(25) {
                        for (v, &c) in chunk.iter_mut().zip(coef.iter()) {
                            *v *= c;
                        }
                    }
                    acc(*theta, d)?;
                }
                if rg(*alpha) {
                    // Σ over filters and input channels of g ⊙ θ, per tap.
                    let mut tap = [0.0f64; 25];
                    for (gc, tc) in g.data().chunks(25).zip(th.data().chunks(25)) {
                        for p in 0..25 {
                            tap[p] += gc[p].f64() * tc[p].f64();
                        }
                    }
                    let d = masks
                        .iter()
                        .map(|m| T::c((0..25).map(|p| tap[p] * m[p].f64()).sum()))
                        .collect();
                    acc(*alpha, Tensor::new(self.shape(*alpha), d)?)?;
                }
            }
            Op::Narrow { x, dim, start } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                dx.accumulate_block(*dim, *start, g);
                acc(*x, dx)?;
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                acc(*x, Tensor::full(self.shape(*x), gv))?;
            }
            Op::Dot { x, c } => {
                let gv = g.data()[0];
                acc(*x, c.map(|v| v * gv))?;
            }
            Op::Fused { xs, local } => {
                let gv = g.data()[0];
                for (&x, l) in xs.iter().zip(local) {
                    if rg(x) {
                        acc(x, l.map(|v| v * gv))?;
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn mix_coefficients<T: Real>(alpha: &[T], masks: &[[T; 25]]) -> [T; 25] {
    let mut coef = [T::zero(); 25];
    for (&a, m) in alpha.iter().zip(masks) {
        for p in 0..25 {
            coef[p] += a * m[p];
        }
    }
    coef
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_and_scale_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn([1, 2, 2, 2], |i| i[3] as f64), true);
        let y = g.scale(x, 2.0);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn reuse_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full([1, 1, 2, 2], 3.0), true);
        let y = g.add(x, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros([1, 1, 2, 2]), true);
        assert!(matches!(g.backward(x), Err(crate::Error::Input(_))));
    }

    #[test]
    fn concat_gradient_is_ones() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros([1, 2, 2, 2]), true);
        let b = g.leaf(Tensor::zeros([1, 3, 2, 2]), true);
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), [1, 5, 2, 2]);
        let l = g.sum(c);
        g.backward(l).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(g.grad(b).unwrap().shape(), [1, 3, 2, 2]);
    }

    #[test]
    fn upsample_gradient_is_four() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full([1, 1, 1, 1], 7.0), true);
        let y = g.upsample_nearest2x(x);
        assert_eq!(g.value(y).data(), &[7.0; 4]);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn silu_at_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros([1, 1, 1, 1]), false);
        let y = g.silu(x);
        assert_eq!(g.value(y).data(), &[0.0]);
    }
}
