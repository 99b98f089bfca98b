//! Reverse-mode automatic differentiation over scalar computation graphs.
//!
//! A [`Graph`] is an append-only tape. Every operation on a [`Var`] pushes one
//! node holding its parent handles and the local partial derivative with
//! respect to each parent, so insertion order is a topological order and the
//! backward pass is a single reverse sweep.
//!
//! ```
//! use cnode_core::diff::Graph;
//!
//! let g = Graph::new();
//! let x = g.var(3.0);
//! let y = x * x;
//! g.backward(y).unwrap();
//! assert_eq!(y.value(), 9.0);
//! assert_eq!(x.grad(), 6.0);
//! ```
//!
//! Non-finite results and cross-graph operands do not panic inside operator
//! overloads. The first such event poisons the graph: [`Graph::status`] and
//! [`Graph::backward`] report it as an error.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    PowI,
    Exp,
    Tanh,
    Relu,
    Elu,
    Recip,
    Square,
    Affine,
    /// Affine node whose weights and inputs are runs of consecutive nodes.
    Dense {
        weights: u32,
        inputs: u32,
        len: u32,
    },
    Sum,
}

impl Op {
    fn name(self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::PowI => "powi",
            Op::Exp => "exp",
            Op::Tanh => "tanh",
            Op::Relu => "max-with-zero",
            Op::Elu => "elu",
            Op::Recip => "reciprocal",
            Op::Square => "square",
            Op::Affine | Op::Dense { .. } => "affine",
            Op::Sum => "sum",
        }
    }
}

#[derive(Default)]
struct Tape {
    ops: Vec<Op>,
    values: Vec<f64>,
    // Node i owns entries offsets[i]..offsets[i + 1] of `parents`/`partials`.
    offsets: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
    grads: Vec<f64>,
    backward_done: bool,
    poison: Option<Error>,
}

impl Tape {
    fn len(&self) -> usize {
        self.ops.len()
    }

    fn clear(&mut self) {
        self.ops.clear();
        self.values.clear();
        self.offsets.clear();
        self.offsets.push(0);
        self.parents.clear();
        self.partials.clear();
        self.grads.clear();
        self.backward_done = false;
        self.poison = None;
    }

    fn poison_with(&mut self, err: Error) {
        if self.poison.is_none() {
            self.poison = Some(err);
        }
    }
}

/// Append-only tape of scalar operations.
pub struct Graph {
    tape: RefCell<Tape>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tape = self.tape.borrow();
        f.debug_struct("Graph")
            .field("nodes", &tape.len())
            .field("entries", &tape.parents.len())
            .field("poisoned", &tape.poison.is_some())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_capacity(0, 0)
    }

    /// Pre-allocates room for `nodes` nodes and `entries` parent links.
    pub fn with_capacity(nodes: usize, entries: usize) -> Self {
        let mut tape = Tape {
            ops: Vec::with_capacity(nodes),
            offsets: Vec::with_capacity(nodes + 1),
            parents: Vec::with_capacity(entries),
            partials: Vec::with_capacity(entries),
            ..Tape::default()
        };
        tape.offsets.push(0);
        Self {
            tape: RefCell::new(tape),
        }
    }

    /// Drops every node while keeping the allocations.
    pub fn reset(&mut self) {
        self.tape.get_mut().clear();
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of parent links recorded so far.
    pub fn entries(&self) -> usize {
        self.tape.borrow().parents.len()
    }

    /// A new leaf node (an input or parameter).
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(Op::Leaf, value, &[], &[])
    }

    /// Leaf nodes for every value of `values`, in order.
    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    /// `Ok` unless a forward operation produced a non-finite value or mixed graphs.
    pub fn status(&self) -> Result<()> {
        match &self.tape.borrow().poison {
            Some(err) => Err(err.clone()),
            None => Ok(()),
        }
    }

    /// Propagates d(root)/d(node) into every node preceding `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        if !std::ptr::eq(root.graph, self) {
            return Err(Error::GraphMismatch);
        }
        let mut tape = self.tape.borrow_mut();
        if let Some(err) = &tape.poison {
            return Err(err.clone());
        }
        if tape.backward_done {
            return Err(Error::StaleGradient);
        }
        let n = tape.len();
        let Tape {
            ops,
            values,
            offsets,
            parents,
            partials,
            grads,
            ..
        } = &mut *tape;
        grads.clear();
        grads.resize(n, 0.0);
        let root = root.index as usize;
        grads[root] = 1.0;
        for node in (0..=root).rev() {
            let g = grads[node];
            if g == 0.0 {
                continue;
            }
            let (lo, hi) = (offsets[node] as usize, offsets[node + 1] as usize);
            for (&p, &d) in parents[lo..hi].iter().zip(&partials[lo..hi]) {
                grads[p as usize] += d * g;
            }
            if let Op::Dense { weights, inputs, len } = ops[node] {
                let (w, x, n) = (weights as usize, inputs as usize, len as usize);
                for j in 0..n {
                    grads[w + j] += g * values[x + j];
                    grads[x + j] += g * values[w + j];
                }
            }
        }
        tape.backward_done = true;
        Ok(())
    }

    /// Clears gradients so `backward` may run again.
    pub fn zero_grad(&self) {
        let mut tape = self.tape.borrow_mut();
        tape.grads.clear();
        tape.backward_done = false;
    }

    /// Gradient of the last backward root with respect to `v`; 0 before any backward pass.
    pub fn grad(&self, v: Var<'_>) -> f64 {
        self.tape
            .borrow()
            .grads
            .get(v.index as usize)
            .copied()
            .unwrap_or(0.0)
    }

    pub fn grads(&self, vars: &[Var<'_>]) -> Vec<f64> {
        let tape = self.tape.borrow();
        vars.iter()
            .map(|v| tape.grads.get(v.index as usize).copied().unwrap_or(0.0))
            .collect()
    }

    fn push(&self, op: Op, value: f64, parents: &[u32], partials: &[f64]) -> Var<'_> {
        let mut tape = self.tape.borrow_mut();
        let index = tape.len();
        if !value.is_finite() {
            tape.poison_with(Error::Numerical {
                op: op.name(),
                node: index,
            });
        }
        tape.ops.push(op);
        tape.values.push(value);
        tape.parents.extend_from_slice(parents);
        tape.partials.extend_from_slice(partials);
        let end = tape.parents.len() as u32;
        tape.offsets.push(end);
        Var {
            graph: self,
            index: index as u32,
            value,
        }
    }

    fn mismatch(&self, value: f64) -> Var<'_> {
        self.tape.borrow_mut().poison_with(Error::GraphMismatch);
        self.push(Op::Leaf, value, &[], &[])
    }
}

/// A node of a [`Graph`]: its forward value plus a handle for gradient lookup.
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    index: u32,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({})", self.index, self.value)
    }
}

impl<'g> Var<'g> {
    pub fn value(self) -> f64 {
        self.value
    }

    pub fn index(self) -> usize {
        self.index as usize
    }

    pub fn graph(self) -> &'g Graph {
        self.graph
    }

    pub fn grad(self) -> f64 {
        self.graph.grad(self)
    }

    /// A leaf carrying the same value; gradients stop here.
    pub fn detach(self) -> Var<'g> {
        self.graph.var(self.value)
    }

    fn same_graph(self, other: Var<'_>) -> bool {
        std::ptr::eq(self.graph, other.graph)
    }

    fn unary(self, op: Op, value: f64, partial: f64) -> Var<'g> {
        self.graph.push(op, value, &[self.index], &[partial])
    }

    fn binary(self, other: Var<'_>, op: Op, value: f64, da: f64, db: f64) -> Var<'g> {
        if !self.same_graph(other) {
            return self.graph.mismatch(value);
        }
        self.graph
            .push(op, value, &[self.index, other.index], &[da, db])
    }

    pub fn exp(self) -> Var<'g> {
        let e = self.value.exp();
        self.unary(Op::Exp, e, e)
    }

    pub fn tanh(self) -> Var<'g> {
        let t = self.value.tanh();
        self.unary(Op::Tanh, t, 1.0 - t * t)
    }

    /// `max(x, 0)` with subgradient 0 at the hinge.
    pub fn relu(self) -> Var<'g> {
        if self.value > 0.0 {
            self.unary(Op::Relu, self.value, 1.0)
        } else {
            self.unary(Op::Relu, 0.0, 0.0)
        }
    }

    /// Exponential linear unit with alpha = 1.
    pub fn elu(self) -> Var<'g> {
        if self.value > 0.0 {
            self.unary(Op::Elu, self.value, 1.0)
        } else {
            let e = self.value.exp();
            self.unary(Op::Elu, e - 1.0, e)
        }
    }

    pub fn recip(self) -> Var<'g> {
        let r = 1.0 / self.value;
        self.unary(Op::Recip, r, -r * r)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(Op::Square, self.value * self.value, 2.0 * self.value)
    }

    pub fn powi(self, n: i32) -> Var<'g> {
        let value = self.value.powi(n);
        let partial = if n == 0 {
            0.0
        } else {
            f64::from(n) * self.value.powi(n - 1)
        };
        self.unary(Op::PowI, value, partial)
    }

    /// `bias + Σ weights[k] * inputs[k]` as a single node.
    pub fn affine(bias: Var<'g>, weights: &[Var<'g>], inputs: &[Var<'g>]) -> Var<'g> {
        assert_eq!(weights.len(), inputs.len(), "affine: length mismatch");
        let graph = bias.graph;
        let (w0, x0) = match (weights.first(), inputs.first()) {
            (Some(w), Some(x)) => (w.index, x.index),
            _ => (0, 0),
        };
        let mut value = bias.value;
        let mut mixed = false;
        let mut runs = true;
        for (j, (w, x)) in weights.iter().zip(inputs).enumerate() {
            value += w.value * x.value;
            mixed |= !bias.same_graph(*w) | !bias.same_graph(*x);
            runs &= (w.index == w0 + j as u32) & (x.index == x0 + j as u32);
        }
        if mixed {
            return graph.mismatch(value);
        }
        if runs && !weights.is_empty() {
            let op = Op::Dense {
                weights: w0,
                inputs: x0,
                len: weights.len() as u32,
            };
            return graph.push(op, value, &[bias.index], &[1.0]);
        }
        let mut parents = Vec::with_capacity(2 * weights.len() + 1);
        let mut partials = Vec::with_capacity(2 * weights.len() + 1);
        parents.push(bias.index);
        partials.push(1.0);
        for (w, x) in weights.iter().zip(inputs) {
            parents.extend_from_slice(&[w.index, x.index]);
            partials.extend_from_slice(&[x.value, w.value]);
        }
        graph.push(Op::Affine, value, &parents, &partials)
    }

    /// Sum of a non-empty slice as a single node.
    pub fn sum(items: &[Var<'g>]) -> Var<'g> {
        let first = items.first().expect("sum of an empty slice");
        let graph = first.graph;
        if items.iter().any(|v| !first.same_graph(*v)) {
            let value = items.iter().map(|v| v.value).sum();
            return graph.mismatch(value);
        }
        let value = items.iter().map(|v| v.value).sum();
        let parents: Vec<u32> = items.iter().map(|v| v.index).collect();
        let partials = vec![1.0; items.len()];
        graph.push(Op::Sum, value, &parents, &partials)
    }
}

impl<'g> Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, Op::Add, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'g> Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, Op::Sub, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'g> Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, Op::Mul, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'g> Div for Var<'g> {
    type Output = Var<'g>;
    fn div(self, rhs: Var<'g>) -> Var<'g> {
        let inv = 1.0 / rhs.value;
        let q = self.value * inv;
        self.binary(rhs, Op::Div, q, inv, -q * inv)
    }
}

impl<'g> Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.unary(Op::Neg, -self.value, -1.0)
    }
}

impl<'g> Add<f64> for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: f64) -> Var<'g> {
        self.unary(Op::Add, self.value + rhs, 1.0)
    }
}

impl<'g> Sub<f64> for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: f64) -> Var<'g> {
        self.unary(Op::Sub, self.value - rhs, 1.0)
    }
}

impl<'g> Mul<f64> for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: f64) -> Var<'g> {
        self.unary(Op::Mul, self.value * rhs, rhs)
    }
}

impl<'g> Div<f64> for Var<'g> {
    type Output = Var<'g>;
    fn div(self, rhs: f64) -> Var<'g> {
        self.unary(Op::Div, self.value / rhs, 1.0 / rhs)
    }
}

impl<'g> Add<Var<'g>> for f64 {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        rhs + self
    }
}

impl<'g> Sub<Var<'g>> for f64 {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        rhs.unary(Op::Sub, self - rhs.value, -1.0)
    }
}

impl<'g> Mul<Var<'g>> for f64 {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        rhs * self
    }
}

impl<'g> Div<Var<'g>> for f64 {
    type Output = Var<'g>;
    fn div(self, rhs: Var<'g>) -> Var<'g> {
        let q = self / rhs.value;
        rhs.unary(Op::Div, q, -q / rhs.value)
    }
}

/// Arithmetic shared by plain `f64` evaluation and graph-recording [`Var`]s.
///
/// Model code (networks, solvers, penalties) is written once against this
/// trait; running it on `f64` gives fast evaluation, running it on `Var`
/// records a differentiable graph.
pub trait Scalar:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn relu(self) -> Self;
    fn elu(self) -> Self;
    fn recip(self) -> Self;
    fn square(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn affine(bias: Self, weights: &[Self], inputs: &[Self]) -> Self;
    /// Panics on an empty slice.
    fn sum(items: &[Self]) -> Self;
}

impl Scalar for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    fn elu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            f64::exp(self) - 1.0
        }
    }
    fn recip(self) -> Self {
        1.0 / self
    }
    fn square(self) -> Self {
        self * self
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn affine(bias: Self, weights: &[Self], inputs: &[Self]) -> Self {
        assert_eq!(weights.len(), inputs.len(), "affine: length mismatch");
        weights
            .iter()
            .zip(inputs)
            .fold(bias, |acc, (w, x)| acc + w * x)
    }
    fn sum(items: &[Self]) -> Self {
        assert!(!items.is_empty(), "sum of an empty slice");
        items.iter().sum()
    }
}

impl<'g> Scalar for Var<'g> {
    fn value(&self) -> f64 {
        self.value
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn relu(self) -> Self {
        Var::relu(self)
    }
    fn elu(self) -> Self {
        Var::elu(self)
    }
    fn recip(self) -> Self {
        Var::recip(self)
    }
    fn square(self) -> Self {
        Var::square(self)
    }
    fn powi(self, n: i32) -> Self {
        Var::powi(self, n)
    }
    fn affine(bias: Self, weights: &[Self], inputs: &[Self]) -> Self {
        Var::affine(bias, weights, inputs)
    }
    fn sum(items: &[Self]) -> Self {
        Var::sum(items)
    }
}
