//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation on a [`Var`] appends a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse and expresses each
//! vector-Jacobian product with ordinary tape operations. With
//! `create_graph` set, those operations are themselves recorded as
//! differentiable nodes, so gradients can be differentiated again
//! (double backpropagation). Without it, the gradient nodes are recorded
//! as constants.

mod check;
mod ops;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

pub use check::{finite_difference_check, hessian_vector_check, objective};
pub use ops::gradient_reversal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(T),
    MatMul,
    Transpose,
    Conv2d { stride: usize },
    ConvInputGrad { stride: usize },
    ConvWeightGrad { stride: usize },
    Relu,
    LeakyRelu(T),
    Abs,
    ClampMin(T),
    Exp,
    Log,
    Sqrt,
    Softmax,
    LogSoftmax,
    Sum,
    SumTo,
    BroadcastTo,
    Reshape,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Embed { axis: usize, start: usize },
    Reverse(T),
    BackwardScale,
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvInputGrad { .. } => "conv2d_input_grad",
            Op::ConvWeightGrad { .. } => "conv2d_weight_grad",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Abs => "abs",
            Op::ClampMin(_) => "clamp_min",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Sum => "sum",
            Op::SumTo => "sum_to",
            Op::BroadcastTo => "broadcast_to",
            Op::Reshape => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Embed { .. } => "embed",
            Op::Reverse(_) => "gradient_reversal",
            Op::BackwardScale => "backward_scale",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    parents: Vec<NodeId>,
    value: Rc<Tensor<T>>,
    requires_grad: bool,
}

/// Append-only computation graph. Parents always precede children.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: Cell<bool>,
    non_finite: Cell<Option<(NodeId, &'static str)>>,
    warnings: RefCell<Vec<String>>,
}

/// A tensor bound to a node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: Cell::new(true),
            non_finite: Cell::new(None),
            warnings: RefCell::new(Vec::new()),
        }
    }

    /// A differentiable input (parameter or data that gradients are taken
    /// with respect to).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Op::Leaf, vec![], value, true)
    }

    /// A value that is never differentiated.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Op::Leaf, vec![], value, false)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Diagnostics recorded by backward passes (e.g. unreachable inputs).
    pub fn warnings(&self) -> Vec<String> {
        self.warnings.borrow().clone()
    }

    /// Fails if any node so far produced a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite.get() {
            Some((node, op)) => Err(Error::NonFinite { node, op }),
            None => Ok(()),
        }
    }

    pub(crate) fn push(&self, op: Op<T>, parents: Vec<NodeId>, value: Tensor<T>) -> Var<'_, T> {
        let requires_grad = self.grad_enabled.get() && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push_node(op, parents, value, requires_grad)
    }

    fn push_node(
        &self,
        op: Op<T>,
        parents: Vec<NodeId>,
        value: Tensor<T>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.non_finite.get().is_none() && !value.is_finite() {
            log::warn!("non-finite value at node {id} ({})", op.name());
            self.non_finite.set(Some((id, op.name())));
        }
        nodes.push(Node {
            op,
            parents,
            value: Rc::new(value),
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn node_info(&self, id: NodeId) -> (Op<T>, Vec<NodeId>) {
        let nodes = self.nodes.borrow();
        (nodes[id].op.clone(), nodes[id].parents.clone())
    }

    pub(crate) fn var(&self, id: NodeId) -> Var<'_, T> {
        Var { tape: self, id }
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph`, the returned gradients are differentiable tape
    /// nodes. Inputs that `output` does not depend on get a zero gradient
    /// and a warning record.
    pub fn backward<'t>(
        &'t self,
        output: Var<'t, T>,
        wrt: &[Var<'t, T>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t, T>>> {
        let shape = output.shape();
        if !shape.is_empty() && shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape));
        }
        let seed = self.constant(Tensor::full(shape, T::one()));
        self.vjp(output, seed, wrt, create_graph)
    }

    /// Vector-Jacobian product: pulls the cotangent `seed` (shaped like
    /// `output`) back to each of `wrt`. `seed` may itself be a
    /// differentiable node.
    pub fn vjp<'t>(
        &'t self,
        output: Var<'t, T>,
        seed: Var<'t, T>,
        wrt: &[Var<'t, T>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t, T>>> {
        if output.shape() != seed.shape() {
            return Err(Error::shape(
                "vjp",
                format!("output {:?} vs seed {:?}", output.shape(), seed.shape()),
            ));
        }
        self.check_finite()?;
        let out = output.id;
        let mut needed = vec![false; out + 1];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.id <= out {
                    needed[w.id] = true;
                }
            }
            for id in 0..=out {
                if !needed[id] && nodes[id].parents.iter().any(|&p| needed[p]) {
                    needed[id] = true;
                }
            }
        }

        let previous = self.grad_enabled.replace(create_graph);
        let result = self.propagate(out, seed, &needed);
        self.grad_enabled.set(previous);
        let grads = result?;

        let mut outs = Vec::with_capacity(wrt.len());
        for w in wrt {
            match grads.get(w.id).copied().flatten() {
                Some(g) => outs.push(self.var(g)),
                None => {
                    let msg = format!(
                        "node {} is unreachable from output {}; gradient is zero",
                        w.id, out
                    );
                    log::warn!("{msg}");
                    self.warnings.borrow_mut().push(msg);
                    outs.push(self.constant(Tensor::zeros(w.shape())));
                }
            }
        }
        self.check_finite()?;
        Ok(outs)
    }

    fn propagate<'t>(
        &'t self,
        out: NodeId,
        seed: Var<'t, T>,
        needed: &[bool],
    ) -> Result<Vec<Option<NodeId>>> {
        let mut grads: Vec<Option<NodeId>> = vec![None; out + 1];
        if needed[out] {
            grads[out] = Some(seed.id);
        }
        for id in (0..=out).rev() {
            let Some(g) = grads[id] else { continue };
            if !needed[id] {
                continue;
            }
            let (op, parents) = self.node_info(id);
            if parents.is_empty() {
                continue;
            }
            let want: Vec<bool> = parents.iter().map(|&p| needed[p]).collect();
            if !want.contains(&true) {
                continue;
            }
            let parent_grads = self.node_vjp(id, &op, &parents, &want, self.var(g))?;
            for (&p, pg) in parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !needed[p] {
                    continue;
                }
                grads[p] = Some(match grads[p] {
                    Some(existing) => self.var(existing).add(pg)?.id,
                    None => pg.id,
                });
            }
        }
        Ok(grads)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> T {
        self.value().item()
    }

    /// A constant copy of this value, cut off from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant((*self.value()).clone())
    }

    /// A new differentiable leaf holding this value.
    pub fn detach_leaf(&self) -> Var<'t, T> {
        self.tape.leaf((*self.value()).clone())
    }
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

#[cfg(test)]
mod tests;
