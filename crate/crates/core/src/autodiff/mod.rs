//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is a Wengert list: every operation appends a node holding its
//! output value and, when gradients are needed, whatever it must remember for
//! the backward sweep. [`Var`] handles index into the tape, so inputs always
//! precede the operations that consume them and a single reverse sweep visits
//! each node once.
//!
//! Gradients are computed once per tape. Calling [`Tape::backward`] a second
//! time is rejected; record a fresh tape for the next step.

mod elementwise;
mod linear;
mod norm;
mod shape;
mod spatial;

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::numel;
use crate::{Error, Real, Result, Tensor};

pub use linear::attention_weights;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct NormStats<S> {
    mean: Vec<S>,
    rstd: Vec<S>,
}

pub(crate) enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Abs(Var),
    Relu(Var),
    Gelu(Var),
    Sin(Var),
    Cos(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Expand(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    MatMul { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, offset: Var, stats: NormStats<S> },
    GroupNorm { x: Var, gain: Var, offset: Var, groups: usize, stats: NormStats<S> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    AvgPool2(Var),
    Bilinear { map: Var, coords: Var },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<S: Real> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
    backpropagated: bool,
    bytes: usize,
    peak_bytes: usize,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    /// A tape that records what backward needs.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, backpropagated: false, bytes: 0, peak_bytes: 0 }
    }

    /// A tape that only evaluates; no operation keeps backward state.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by recorded values.
    pub fn value_bytes(&self) -> usize {
        self.bytes
    }

    /// Largest [`Tape::value_bytes`] seen so far.
    pub fn peak_value_bytes(&self) -> usize {
        self.peak_bytes
    }

    /// Drops every node from index `len` on, freeing their values. Only
    /// allowed on tapes without gradients; `Var`s at or past `len` become
    /// invalid.
    pub fn truncate(&mut self, len: usize) -> Result<()> {
        if self.grad_enabled {
            return Err(Error::invalid("truncate needs a tape without gradients"));
        }
        for node in self.nodes.drain(len.min(self.nodes.len())..) {
            self.bytes -= node.value.len() * core::mem::size_of::<S>();
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.push(Node { value, op: Op::Leaf, requires_grad: rg })
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn parameter(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, node: Node<S>) -> Var {
        self.bytes += node.value.len() * core::mem::size_of::<S>();
        self.peak_bytes = self.peak_bytes.max(self.bytes);
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn record(
        &mut self,
        value: Tensor<S>,
        inputs: &[Var],
        op: impl FnOnce() -> Op<S>,
    ) -> Var {
        let rg = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op() } else { Op::Leaf };
        self.push(Node { value, op, requires_grad: rg })
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&mut self, output: Var) -> Result<Gradients<S>> {
        let shape = self.shape(output);
        if numel(shape) != 1 {
            return Err(Error::NonScalarBackward(shape.to_vec()));
        }
        if self.backpropagated {
            return Err(Error::BackwardTwice);
        }
        self.backpropagated = true;
        let mut grads: Vec<Option<Vec<S>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(vec![S::one()]);
        }
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.propagate(i, &g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let mut acc = Accumulator { tape: self, grads };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc.add(*a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc.add(*b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc.add(*a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc.add(*b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => self.backward_mul(*a, *b, g, &mut acc),
            Op::Scale(a, c) => {
                acc.add(*a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c))
            }
            Op::Abs(a) => self.backward_unary(*a, g, &mut acc, elementwise::abs_grad),
            Op::Relu(a) => self.backward_unary(*a, g, &mut acc, |x| if x > S::zero() { S::one() } else { S::zero() }),
            Op::Gelu(a) => self.backward_unary(*a, g, &mut acc, elementwise::gelu_grad),
            Op::Sin(a) => self.backward_unary(*a, g, &mut acc, |x| x.cos()),
            Op::Cos(a) => self.backward_unary(*a, g, &mut acc, |x| -x.sin()),
            Op::Sum(a) => acc.add(*a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = S::from_usize(self.value(*a).len());
                acc.add(*a, |d| d.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::Reshape(a) => acc.add(*a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g)),
            Op::Permute(a, perm) => self.backward_permute(*a, perm, i, g, &mut acc),
            Op::Expand(a) => self.backward_expand(*a, i, g, &mut acc),
            Op::Narrow { x, axis, start } => self.backward_narrow(*x, *axis, *start, i, g, &mut acc),
            Op::Concat { xs, axis } => self.backward_concat(xs, *axis, g, &mut acc),
            Op::MatMul { a, b, trans_b } => self.backward_matmul(*a, *b, *trans_b, g, &mut acc),
            Op::Linear { x, w, b } => self.backward_linear(*x, *w, *b, g, &mut acc),
            Op::Softmax(a) => self.backward_softmax(*a, i, g, &mut acc),
            Op::LayerNorm { x, gain, offset, stats } => {
                self.backward_layer_norm(*x, *gain, *offset, stats, g, &mut acc)
            }
            Op::GroupNorm { x, gain, offset, groups, stats } => {
                self.backward_group_norm(*x, *gain, *offset, *groups, stats, g, &mut acc)
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.backward_conv2d(*x, *w, *b, *stride, *pad, g, &mut acc)
            }
            Op::AvgPool2(x) => self.backward_avg_pool2(*x, g, &mut acc),
            Op::Bilinear { map, coords } => self.backward_bilinear(*map, *coords, g, &mut acc),
        }
    }

    fn backward_unary(&self, a: Var, g: &[S], acc: &mut Accumulator<'_, S>, df: impl Fn(S) -> S) {
        let x = self.data(a);
        acc.add(a, |d| {
            for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                *d += g * df(x);
            }
        });
    }

    fn backward_mul(&self, a: Var, b: Var, g: &[S], acc: &mut Accumulator<'_, S>) {
        let (av, bv) = (self.data(a), self.data(b));
        acc.add(a, |d| {
            for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                *d += g * y;
            }
        });
        acc.add(b, |d| {
            for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                *d += g * x;
            }
        });
    }
}

/// Adds contributions into the gradient slots of inputs that need them.
pub(crate) struct Accumulator<'a, S: Real> {
    tape: &'a Tape<S>,
    grads: &'a mut [Option<Vec<S>>],
}

impl<S: Real> Accumulator<'_, S> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.tape.nodes[v.0].requires_grad
    }

    pub(crate) fn add(&mut self, v: Var, f: impl FnOnce(&mut [S])) {
        if !self.wants(v) {
            return;
        }
        let len = self.tape.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![S::zero(); len]);
        f(slot);
    }
}

/// Gradients of one backward sweep, addressed by the leaf [`Var`]s.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Real> Gradients<S> {
    /// `None` when the output does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient of `v`, with zeros when the output does not depend on it.
    pub fn get_or_zeros(&self, tape: &Tape<S>, v: Var) -> Tensor<S> {
        let shape = tape.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(shape),
        }
    }
}
