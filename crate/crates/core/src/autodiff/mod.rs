//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and the handles of its
//! inputs. Nodes are only ever appended, so the tape is topologically ordered
//! by construction. [`Tape::backward`] walks it in reverse and accumulates
//! gradients into every node that requires one; calling it twice without
//! [`Tape::zero_grad`] adds the gradients again.

mod check;
pub(crate) mod kernels;
mod ops;

use alloc::vec;
use alloc::vec::Vec;

pub use check::{finite_diff_check, GradCheckReport, ScalarFn};
pub use ops::ReduceOp;
pub(crate) use ops::Op;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<S: Real> {
    pub(crate) value: Tensor<S>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Tensor<S>>,
}

pub struct Tape<S: Real = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// First node whose recomputed value differs from the recorded one.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayMismatch {
    pub node: usize,
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input: gradients will be accumulated for it.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// A constant input: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    /// Constant copy of `v`'s current value, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// True if any node on the tape carries gradient state.
    pub fn has_grad_state(&self) -> bool {
        self.nodes.iter().any(|n| n.requires_grad || n.grad.is_some())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownVar(v.0))
        }
    }

    fn push_node(&mut self, value: Tensor<S>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluate `op` on the current tape and append the result.
    pub(crate) fn push_op(&mut self, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        for &i in &inputs {
            self.check_var(i)?;
        }
        let value = ops::eval(&op, &self.nodes)?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push_node(value, op, requires_grad))
    }

    /// Accumulate `d loss / d node` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        self.check_var(loss)?;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].value.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let contributions = ops::vjp(&self.nodes[i].op, &self.nodes, i, &g)?;
            for (input, gi) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut pending[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(gi),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, b)| *a = *a + *b),
                None => {
                    node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
            }
        }
        Ok(())
    }

    /// Recompute every op from its recorded inputs and compare bit patterns.
    pub fn replay(&self) -> Result<Option<ReplayMismatch>> {
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let v = ops::eval(&node.op, &self.nodes)?;
            let same = v.shape() == node.value.shape()
                && v
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits());
            if !same {
                return Ok(Some(ReplayMismatch { node: i }));
            }
        }
        Ok(None)
    }

    /// Every node's inputs precede it.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.inputs().iter().all(|v| v.0 < i))
    }
}
