//! Define-by-run reverse-mode differentiation over dense [`Tensor`]s.
//!
//! A [`Tape`] records every operation performed through [`Var`] handles.
//! Nodes are appended in creation order, which is already a topological
//! order, so [`Var::backward`] walks the node list once in reverse.
//!
//! [`Var::stop_gradient`] records a constant node carrying the same value.
//! Nothing upstream of it can receive gradient through that branch, so the
//! blocked contribution is exactly zero rather than numerically small.
//!
//! Conventions: `relu'(0) = 0`; `sqrt` is not floored here, callers add
//! their own epsilon inside the radical.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Div(usize, usize, Bcast),
    Scale(usize, f64),
    AddScalar(usize),
    Square(usize),
    Sqrt(usize),
    Relu(usize),
    Silu(usize),
    Tanh(usize),
    Sum(usize),
    Mean(usize),
    SumAxis { input: usize, outer: usize, n: usize, inner: usize },
    BroadcastTo(usize, Vec<usize>),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    TransposeLast(usize),
    Reshape(usize),
    Softmax(usize),
    LayerNorm { input: usize, eps: f64 },
    GatherRows { input: usize, index: Vec<usize> },
}

/// Output-to-input offset maps for broadcasting binary operations. `None`
/// means the operand already has the output shape.
#[derive(Debug)]
struct Bcast {
    a: Option<Vec<usize>>,
    b: Option<Vec<usize>>,
}

impl Bcast {
    fn ia(&self, i: usize) -> usize {
        self.a.as_ref().map_or(i, |m| m[i])
    }

    fn ib(&self, i: usize) -> usize {
        self.b.as_ref().map_or(i, |m| m[i])
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable input; receives a gradient on backward.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A fixed input; never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn grad_flag(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        let nodes: Ref<'_, Vec<Node>> = self.tape.nodes.borrow();
        nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.grad_flag(self.id)
    }

    /// Scalar value; panics on non-scalar nodes.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar of shape {:?}", v.shape());
        v.item()
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands belong to different tapes"
        );
    }

    fn binary(
        &self,
        other: &Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize, Bcast) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other);
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(a.shape(), b.shape())?;
        let map_a = (a.shape() != out_shape.as_slice()).then(|| broadcast_map(&out_shape, a.shape()));
        let map_b = (b.shape() != out_shape.as_slice()).then(|| broadcast_map(&out_shape, b.shape()));
        let bc = Bcast { a: map_a, b: map_b };
        let n: usize = out_shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f64> = if bc.a.is_none() && bc.b.is_none() {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(ad[bc.ia(i)], bd[bc.ib(i)])).collect()
        };
        let rg = self.requires_grad() || other.requires_grad();
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.tape.push(value, make(self.id, other.id, bc), rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |x, y| x / y, Op::Div)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn sqrt(&self) -> Var<'t> {
        let v = self.value().map(f64::sqrt);
        self.unary(v, Op::Sqrt(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn silu(&self) -> Var<'t> {
        let v = self.value().map(|x| x * sigmoid(x));
        self.unary(v, Op::Silu(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    /// Identity forward, zero backward.
    pub fn stop_gradient(&self) -> Var<'t> {
        let v = (*self.value()).clone();
        self.tape.push(v, Op::Constant, false)
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().mean());
        self.unary(v, Op::Mean(self.id))
    }

    /// Sum over `axis`, keeping it as an extent-1 axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(&xd[base..base + inner]) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        let v = Tensor::new(&out_shape, out)?;
        Ok(self.unary(v, Op::SumAxis { input: self.id, outer, n, inner }))
    }

    /// Mean over `axis`, keeping it as an extent-1 axis.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::dim(format!("axis {axis} out of range")))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    /// Explicit broadcast to a larger compatible shape.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = broadcast_shape(x.shape(), shape)?;
        if out != shape {
            return Err(Error::dim(format!(
                "cannot broadcast {:?} to {:?}",
                x.shape(),
                shape
            )));
        }
        let map = broadcast_map(shape, x.shape());
        let xd = x.data();
        let v = Tensor::new(shape, map.iter().map(|&i| xd[i]).collect())?;
        Ok(self.unary(v, Op::BroadcastTo(self.id, map)))
    }

    /// `[.., k] x [k, n] -> [.., n]` with a 2-D right operand.
    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let v = self.value().matmul(&rhs.value())?;
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(v, Op::MatMul(self.id, rhs.id), rg))
    }

    /// `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn bmm(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let a = self.value();
        let b = rhs.value();
        let (bs, m, k, n) = match (a.shape(), b.shape()) {
            (&[b1, m, k], &[b2, k2, n]) if b1 == b2 && k == k2 => (b1, m, k, n),
            (sa, sb) => {
                return Err(Error::dim(format!("bmm shapes {sa:?} x {sb:?}")));
            }
        };
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..],
                (k, 1),
                &b.data()[i * k * n..],
                (n, 1),
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let v = Tensor::new(&[bs, m, n], out)?;
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(v, Op::BatchMatMul(self.id, rhs.id), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let x = self.value();
        let v = transpose_last(&x)?;
        Ok(self.unary(v, Op::TransposeLast(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().ok_or_else(|| Error::dim("softmax on scalar"))?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let v = Tensor::new(x.shape(), out)?;
        Ok(self.unary(v, Op::Softmax(self.id)))
    }

    /// Affine-free layer normalization over the last axis.
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().ok_or_else(|| Error::dim("layer_norm on scalar"))?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * inv;
            }
        }
        let v = Tensor::new(x.shape(), out)?;
        Ok(self.unary(v, Op::LayerNorm { input: self.id, eps }))
    }

    /// Selects rows of a 2-D tensor: `[r, c] -> [index.len(), c]`.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::dim(format!("row {i} out of range {r}")));
            }
            out.extend_from_slice(x.row(i));
        }
        let v = Tensor::new(&[index.len(), c], out)?;
        Ok(self.unary(
            v,
            Op::GatherRows {
                input: self.id,
                index: index.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        let loss = &nodes[self.id];
        if loss.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            propagate(&nodes, id, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let mut out = Vec::with_capacity(grads.len());
        for (id, g) in grads.into_iter().enumerate() {
            out.push(match (&nodes[id].op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::new(nodes[id].value.shape(), g)?),
                (Op::Leaf, None) => Some(Tensor::zeros(nodes[id].value.shape())),
                _ => None,
            });
        }
        Ok(Gradients { grads: out })
    }
}

/// Leaf gradients produced by [`Var::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf. Leaves created after the loss, and non-leaf
    /// nodes, return `None`.
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for a leaf, or zeros of the leaf's shape when absent.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let wants = |i: usize| nodes[i].requires_grad;
    let len_of = |i: usize| nodes[i].value.len();
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if wants(*a) {
                accumulate(&mut grads[*a], len_of(*a), |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[bc.ia(i)] += gi;
                    }
                });
            }
            if wants(*b) {
                accumulate(&mut grads[*b], len_of(*b), |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[bc.ib(i)] += sign * gi;
                    }
                });
            }
        }
        Op::Mul(a, b, bc) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if wants(*a) {
                accumulate(&mut grads[*a], len_of(*a), |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[bc.ia(i)] += gi * bv[bc.ib(i)];
                    }
                });
            }
            if wants(*b) {
                accumulate(&mut grads[*b], len_of(*b), |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[bc.ib(i)] += gi * av[bc.ia(i)];
                    }
                });
            }
        }
        Op::Div(a, b, bc) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if wants(*a) {
                accumulate(&mut grads[*a], len_of(*a), |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[bc.ia(i)] += gi / bv[bc.ib(i)];
                    }
                });
            }
            if wants(*b) {
                accumulate(&mut grads[*b], len_of(*b), |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        let y = bv[bc.ib(i)];
                        buf[bc.ib(i)] -= gi * av[bc.ia(i)] / (y * y);
                    }
                });
            }
        }
        Op::Scale(a, s) => {
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += s * gi;
                }
            });
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            });
        }
        Op::Square(a) => {
            let x = nodes[*a].value.data();
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for ((b, gi), xi) in buf.iter_mut().zip(g).zip(x) {
                    *b += 2.0 * xi * gi;
                }
            });
        }
        Op::Sqrt(a) => {
            let y = node.value.data();
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for ((b, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                    *b += gi * 0.5 / yi;
                }
            });
        }
        Op::Relu(a) => {
            let x = nodes[*a].value.data();
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for ((b, gi), xi) in buf.iter_mut().zip(g).zip(x) {
                    if *xi > 0.0 {
                        *b += gi;
                    }
                }
            });
        }
        Op::Silu(a) => {
            let x = nodes[*a].value.data();
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for ((b, gi), &xi) in buf.iter_mut().zip(g).zip(x) {
                    let s = sigmoid(xi);
                    *b += gi * (s + xi * s * (1.0 - s));
                }
            });
        }
        Op::Tanh(a) => {
            let y = node.value.data();
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for ((b, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                    *b += gi * (1.0 - yi * yi);
                }
            });
        }
        Op::Sum(a) => {
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for b in buf.iter_mut() {
                    *b += g[0];
                }
            });
        }
        Op::Mean(a) => {
            let n = len_of(*a) as f64;
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for b in buf.iter_mut() {
                    *b += g[0] / n;
                }
            });
        }
        Op::SumAxis { input, outer, n, inner } => {
            let (outer, n, inner) = (*outer, *n, *inner);
            accumulate(&mut grads[*input], len_of(*input), |buf| {
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        for (b, s) in buf[base..base + inner].iter_mut().zip(src) {
                            *b += s;
                        }
                    }
                }
            });
        }
        Op::BroadcastTo(a, map) => {
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for (gi, &j) in g.iter().zip(map) {
                    buf[j] += gi;
                }
            });
        }
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (k, n) = (bv.shape()[0], bv.shape()[1]);
            let m = if k == 0 { 0 } else { av.len() / k };
            if wants(*a) {
                // dA = G B^T
                accumulate(&mut grads[*a], av.len(), |buf| {
                    gemm(m, n, k, g, (n, 1), bv.data(), (1, n), buf, true);
                });
            }
            if wants(*b) {
                // dB = A^T G
                accumulate(&mut grads[*b], bv.len(), |buf| {
                    gemm(k, m, n, av.data(), (1, k), g, (n, 1), buf, true);
                });
            }
        }
        Op::BatchMatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = bv.shape()[2];
            if wants(*a) {
                accumulate(&mut grads[*a], av.len(), |buf| {
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            (n, 1),
                            &bv.data()[i * k * n..],
                            (1, n),
                            &mut buf[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                });
            }
            if wants(*b) {
                accumulate(&mut grads[*b], bv.len(), |buf| {
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &av.data()[i * m * k..],
                            (1, k),
                            &g[i * m * n..],
                            (n, 1),
                            &mut buf[i * k * n..(i + 1) * k * n],
                            true,
                        );
                    }
                });
            }
        }
        Op::TransposeLast(a) => {
            let out_shape = node.value.shape();
            let gt = Tensor::new(out_shape, g.to_vec()).and_then(|t| transpose_last(&t));
            let gt = gt.expect("transpose of gradient with recorded shape");
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for (b, gi) in buf.iter_mut().zip(gt.data()) {
                    *b += gi;
                }
            });
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let n = *node.value.shape().last().unwrap();
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for ((brow, grow), yrow) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((b, gi), yi) in brow.iter_mut().zip(grow).zip(yrow) {
                        *b += yi * (gi - dot);
                    }
                }
            });
        }
        Op::LayerNorm { input, eps } => {
            let x = nodes[*input].value.data();
            let y = node.value.data();
            let n = *node.value.shape().last().unwrap();
            let nf = n as f64;
            accumulate(&mut grads[*input], len_of(*input), |buf| {
                for (((brow, grow), yrow), xrow) in buf
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(y.chunks(n))
                    .zip(x.chunks(n))
                {
                    let mu = xrow.iter().sum::<f64>() / nf;
                    let var = xrow.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gm = grow.iter().sum::<f64>() / nf;
                    let gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for ((b, gi), yi) in brow.iter_mut().zip(grow).zip(yrow) {
                        *b += inv * (gi - gm - yi * gy);
                    }
                }
            });
        }
        Op::GatherRows { input, index } => {
            let c = node.value.shape()[1];
            accumulate(&mut grads[*input], len_of(*input), |buf| {
                for (r, &src) in index.iter().enumerate() {
                    for j in 0..c {
                        buf[src * c + j] += g[r * c + j];
                    }
                }
            });
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn transpose_last(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::dim(format!("transpose needs >= 2 axes, got {shape:?}")));
    }
    let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let batch: usize = shape[..shape.len() - 2].iter().product();
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for b in 0..batch {
        let off = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[off + j * r + i] = xd[off + i * c + j];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    let nd = out_shape.len();
    out_shape.swap(nd - 2, nd - 1);
    Tensor::new(&out_shape, out)
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

/// For every linear index of `out`, the linear index into a tensor of
/// shape `inp` that broadcasts onto it.
fn broadcast_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let off = nd - inp.len();
    // input strides aligned to output axes; zero on broadcast axes
    let mut strides = vec![0usize; nd];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        strides[i + off] = if inp[i] == 1 { 0 } else { s };
        s *= inp[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut cur = 0usize;
    for _ in 0..total {
        map.push(cur);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            cur += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            cur -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[3.0, 4.0]);
    }

    #[test]
    fn scalar_product_grads() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[1, 1], &[2.0]));
        let b = tape.leaf(t(&[1, 1], &[3.0]));
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.item(), 6.0);
        let g = c.sum().backward().unwrap();
        assert_eq!(g.wrt(&a).data(), &[3.0]);
        assert_eq!(g.wrt(&b).data(), &[2.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(&b), Err(Error::Dim(_))));
    }

    #[test]
    fn stop_gradient_forward_is_identity() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.5, -2.0]));
        assert_eq!(x.stop_gradient().value().data(), &[1.5, -2.0]);
    }

    #[test]
    fn stop_gradient_blocks_one_factor() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.5, -2.0, 0.25]));
        let loss = x.stop_gradient().mul(&x).unwrap().sum();
        let g = loss.backward().unwrap();
        assert_eq!(g.wrt(&x).data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn fully_blocked_path_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3.0, 4.0]));
        let loss = x.stop_gradient().sum();
        let g = loss.backward().unwrap();
        assert_eq!(g.wrt(&x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn mean_and_grad() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2.0, 4.0, 6.0]));
        let m = x.mean();
        assert_eq!(m.item(), 4.0);
        let g = m.backward().unwrap();
        for v in g.wrt(&x).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = x.relu();
        assert_eq!(y.value().data(), &[0.0, 0.0, 2.0]);
        let g = y.sum().backward().unwrap();
        assert_eq!(g.wrt(&x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let g = x.square().sum().backward().unwrap();
        assert_eq!(g.wrt(&x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let c = tape.scalar(5.0);
        let g = c.backward().unwrap();
        assert_eq!(g.wrt(&x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(x.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_incompatible() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(a.add(&b), Err(Error::Dim(_))));
        assert!(matches!(b.broadcast_to(&[3, 3]), Err(Error::Dim(_))));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let c = tape.leaf(t(&[2, 1], &[10.0, 20.0]));
        let y = a.add(&b).unwrap().add(&c).unwrap();
        assert_eq!(y.value().data(), &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
        let g = y.sum().backward().unwrap();
        assert_eq!(g.wrt(&b).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.wrt(&c).data(), &[3.0, 3.0]);
    }

    #[test]
    fn broadcast_map_middle_axis() {
        let map = broadcast_map(&[2, 3, 2], &[2, 1, 2]);
        assert_eq!(map, vec![0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
    }

    #[test]
    fn gather_rows_scatters_back() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = x.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(y.value().data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let g = y.sum().backward().unwrap();
        assert_eq!(g.wrt(&x).data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(x.gather_rows(&[3]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 100.0]));
        let y = x.softmax().unwrap().value();
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }
}
