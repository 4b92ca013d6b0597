//! Tape-based reverse-mode differentiation over tensor operations.
//!
//! A [`Tape`] is an append-only list of nodes. Each node stores the op that
//! produced it, the ids of its inputs (always smaller than its own id) and
//! its forward value. [`Tape::backward`] walks the nodes once in reverse and
//! accumulates adjoints into a [`GradMap`].
//!
//! Adjoints recompute whatever intermediate quantities they need from the
//! stored input and output values, so a node carries no hidden state beyond
//! its op parameters.

mod check;
mod ops;

pub use check::{
    check_function, default_shapes, finite_diff_grad, grad_check, grad_check_all, grad_check_custom, GradCheckReport,
};
pub use ops::{CustomOp, Op, OpKind};

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Rc<Tensor>,
}

/// Append-only record of a differentiable computation. Single writer.
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
        write!(f, "Var(#{}, {:?})", self.id, self.value().shape())
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

    /// Adds an input tensor (parameter, data or constant).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, Vec::new(), value)
    }

    pub fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub fn var(&self, id: usize) -> Result<Var<'_>> {
        if id >= self.len() {
            return Err(Error::Contract(format!("node {id} is not on this tape")));
        }
        Ok(Var { tape: self, id })
    }

    fn push(&self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            inputs,
            value: Rc::new(value),
        });
        Var { tape: self, id }
    }

    fn check_inputs(&self, op: &Op, inputs: &[Var<'_>]) -> Result<()> {
        if let Some(arity) = op.kind().arity() {
            if arity != inputs.len() {
                return Err(Error::Contract(format!(
                    "{} expects {arity} inputs, got {}",
                    op.kind().name(),
                    inputs.len()
                )));
            }
        }
        for v in inputs {
            if !std::ptr::eq(v.tape, self) || v.id >= self.len() {
                return Err(Error::Contract("input is not on this tape".into()));
            }
        }
        Ok(())
    }

    /// Appends a node whose value was computed elsewhere.
    ///
    /// The value shape must match what the op would produce from `inputs`.
    pub fn record<'t>(&'t self, op: Op, inputs: &[Var<'t>], value: Tensor) -> Result<Var<'t>> {
        self.check_inputs(&op, inputs)?;
        if matches!(op, Op::Leaf) && !inputs.is_empty() {
            return Err(Error::Contract("leaf nodes take no inputs".into()));
        }
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(op, ids, value))
    }

    /// Computes `op` forward on the values of `inputs` and records it.
    pub fn apply<'t>(&'t self, op: Op, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        self.check_inputs(&op, inputs)?;
        let values: Vec<Rc<Tensor>> = inputs.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = ops::forward(&op, &refs)?;
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(op, ids, out))
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var<'_>) -> Result<GradMap> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.inputs.is_empty() {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
                let input_grads = ops::backward(&node.op, &inputs, &node.value, &g)?;
                for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                    match &mut grads[inp] {
                        Some(acc) => acc.add_assign(&ig)?,
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(GradMap { grads, shapes })
    }
}

/// Node id → gradient. Unreached nodes read as zeros of the node's shape.
#[derive(Debug, Clone)]
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl GradMap {
    pub fn get(&self, v: Var<'_>) -> Tensor {
        self.get_id(v.id)
    }

    pub fn get_id(&self, id: usize) -> Tensor {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id]),
        }
    }

    pub fn is_reached(&self, v: Var<'_>) -> bool {
        self.grads[v.id].is_some()
    }
}

impl PartialEq for GradMap {
    fn eq(&self, other: &Self) -> bool {
        self.shapes == other.shapes
            && (0..self.shapes.len()).all(|i| self.get_id(i) == other.get_id(i))
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
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(self, op: Op) -> Result<Var<'t>> {
        self.tape.apply(op, &[self])
    }

    fn binary(self, op: Op, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(op, &[self, other])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Mul, other)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(s))
    }

    /// `self + other` where `other`'s shape is a suffix of `self`'s.
    pub fn add_broadcast(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::AddBroadcast, other)
    }

    /// Contracts the last axis of `self` with a 2-D right operand.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::MatMul, other)
    }

    /// `self · w + b` over the last axis.
    pub fn linear(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.matmul(w)?.add_broadcast(b)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::Reshape(shape.to_vec()))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::Permute(axes.to_vec()))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Op::Relu)
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary(Op::Gelu)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        self.unary(Op::Softmax)
    }

    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.tape.apply(Op::LayerNorm { eps }, &[self, gamma, beta])
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(Op::Sum)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.unary(Op::MeanAxis(axis))
    }

    pub fn index0(self, i: usize) -> Result<Var<'t>> {
        self.unary(Op::Index0(i))
    }

    pub fn stack(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::EmptyBatch("stack"))?;
        first.tape.apply(Op::Stack0, parts)
    }

    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::GatherRows(rows.into()))
    }

    pub fn scatter_add_rows(self, rows: &[usize], total: usize) -> Result<Var<'t>> {
        self.unary(Op::ScatterAddRows {
            indices: rows.into(),
            rows: total,
        })
    }

    /// Multiplies slab `r` along axis 0 by `scales[r]`.
    pub fn scale_rows(self, scales: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::ScaleRows, scales)
    }

    pub fn select_entries(self, at: &[(usize, usize)]) -> Result<Var<'t>> {
        self.unary(Op::SelectEntries(at.into()))
    }

    /// Zeroes unselected entries of each probability row and renormalizes
    /// the selected ones to sum to one.
    pub fn topk_renorm(self, selected: Vec<Vec<usize>>) -> Result<Var<'t>> {
        self.unary(Op::TopKRenorm(selected.into()))
    }

    /// `[..., H, W]` real → `[2, ..., H, W]` packed (re, im) spectrum.
    pub fn fft2(self) -> Result<Var<'t>> {
        self.unary(Op::Fft2)
    }

    /// Packed `[2, ..., H, W]` spectrum → real part of the inverse transform.
    pub fn ifft2_re(self) -> Result<Var<'t>> {
        self.unary(Op::Ifft2Re)
    }

    pub fn attention(self, k: Var<'t>, v: Var<'t>, heads: usize) -> Result<Var<'t>> {
        self.tape.apply(Op::Attention { heads }, &[self, k, v])
    }

    pub fn attention_tiled(self, k: Var<'t>, v: Var<'t>, heads: usize, tile: usize) -> Result<Var<'t>> {
        self.tape.apply(Op::AttentionTiled { heads, tile }, &[self, k, v])
    }

    /// Mean relative L2 error against a constant target, per `[B, C]` plane.
    pub fn rel_l2(self, truth: &Tensor, eps: f64) -> Result<Var<'t>> {
        self.unary(Op::RelL2 {
            truth: Rc::new(truth.clone()),
            eps,
        })
    }
}
