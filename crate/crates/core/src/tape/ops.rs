//! Forward operations on [`Var`] and their vector-Jacobian products.

use super::{NodeId, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Identity in the forward pass; multiplies the incoming gradient by
/// `-lambda` in the backward pass.
pub fn gradient_reversal<'t, T: Scalar>(x: Var<'t, T>, lambda: T) -> Var<'t, T> {
    x.gradient_reversal(lambda)
}

fn same_tape<T>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(
        std::ptr::eq(a.tape, b.tape),
        "variables from different tapes combined"
    );
}

impl<'t, T: Scalar> Var<'t, T> {
    fn unary(self, op: Op<T>, value: Tensor<T>) -> Var<'t, T> {
        self.tape.push(op, vec![self.id], value)
    }

    fn broadcast_pair(self, other: Var<'t, T>, op: &'static str) -> Result<(Self, Self)> {
        same_tape(&self, &other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            return Ok((self, other));
        }
        let target = kernels::broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::shape(op, format!("{sa:?} and {sb:?}")))?;
        let a = if sa == target { self } else { self.broadcast_to(&target)? };
        let b = if sb == target { other } else { other.broadcast_to(&target)? };
        Ok((a, b))
    }

    fn binary(self, other: Var<'t, T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        let (a, b) = self.broadcast_pair(other, op.name())?;
        let value = a.value().zip_map(&b.value(), f)?;
        Ok(self.tape.push(op, vec![a.id, b.id], value))
    }

    /// Elementwise sum (numpy broadcasting).
    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn neg(self) -> Self {
        let v = self.value().map(|a| -a);
        self.unary(Op::Neg, v)
    }

    /// Multiplication by a constant.
    pub fn scale(self, c: T) -> Self {
        let v = self.value().map(|a| a * c);
        self.unary(Op::Scale(c), v)
    }

    /// Adds a constant to every element.
    pub fn add_scalar(self, c: T) -> Self {
        let k = self.tape.scalar(c);
        self.add(k).expect("scalar broadcasts")
    }

    /// Multiplies elementwise by a constant tensor (broadcasting allowed).
    pub fn mul_const(self, c: &Tensor<T>) -> Result<Self> {
        let k = self.tape.constant(c.clone());
        self.mul(k)
    }

    /// `[m, k] × [k, n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Self> {
        same_tape(&self, &other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} × {sb:?}")));
        }
        let v = kernels::matmul(&self.value(), &other.value());
        Ok(self.tape.push(Op::MatMul, vec![self.id, other.id], v))
    }

    pub fn transpose(self) -> Result<Self> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?} is not a matrix")));
        }
        let v = kernels::transpose(&self.value());
        Ok(self.unary(Op::Transpose, v))
    }

    /// 3×3 convolution with zero padding 1. `self: [n, ci, h, w]`,
    /// `weight: [co, ci, 3, 3]`, stride 1 or 2.
    pub fn conv2d(self, weight: Var<'t, T>, stride: usize) -> Result<Self> {
        same_tape(&self, &weight);
        let (sx, sw) = (self.shape(), weight.shape());
        if sx.len() != 4
            || sw.len() != 4
            || sw[1] != sx[1]
            || sw[2] != kernels::KERNEL
            || sw[3] != kernels::KERNEL
            || !(stride == 1 || stride == 2)
        {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?}, weight {sw:?}, stride {stride}"),
            ));
        }
        let v = kernels::conv2d(&self.value(), &weight.value(), stride);
        Ok(self.tape.push(Op::Conv2d { stride }, vec![self.id, weight.id], v))
    }

    fn conv2d_input_grad(self, weight: Var<'t, T>, stride: usize, in_hw: (usize, usize)) -> Self {
        let v = kernels::conv2d_input_grad(&self.value(), &weight.value(), stride, in_hw);
        self.tape
            .push(Op::ConvInputGrad { stride }, vec![self.id, weight.id], v)
    }

    fn conv2d_weight_grad(input: Var<'t, T>, grad: Var<'t, T>, stride: usize) -> Self {
        let v = kernels::conv2d_weight_grad(&input.value(), &grad.value(), stride);
        input
            .tape
            .push(Op::ConvWeightGrad { stride }, vec![input.id, grad.id], v)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Self {
        let v = self.value().map(|a| if a > T::zero() { a } else { T::zero() });
        self.unary(Op::Relu, v)
    }

    pub fn leaky_relu(self, slope: T) -> Self {
        let v = self.value().map(|a| if a > T::zero() { a } else { a * slope });
        self.unary(Op::LeakyRelu(slope), v)
    }

    pub fn abs(self) -> Self {
        let v = self.value().map(|a| a.abs());
        self.unary(Op::Abs, v)
    }

    /// `max(x, floor)`.
    pub fn clamp_min(self, floor: T) -> Self {
        let v = self.value().map(|a| a.max(floor));
        self.unary(Op::ClampMin(floor), v)
    }

    pub fn exp(self) -> Self {
        let v = self.value().map(|a| a.exp());
        self.unary(Op::Exp, v)
    }

    pub fn log(self) -> Self {
        let v = self.value().map(|a| a.ln());
        self.unary(Op::Log, v)
    }

    pub fn sqrt(self) -> Self {
        let v = self.value().map(|a| a.sqrt());
        self.unary(Op::Sqrt, v)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Self {
        let v = kernels::softmax_last(&self.value());
        self.unary(Op::Softmax, v)
    }

    /// Log-softmax over the last axis (log-sum-exp stabilized).
    pub fn log_softmax(self) -> Self {
        let v = kernels::log_softmax_last(&self.value());
        self.unary(Op::LogSoftmax, v)
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(self) -> Self {
        let v = Tensor::scalar(self.value().sum());
        self.unary(Op::Sum, v)
    }

    pub fn mean(self) -> Self {
        let n = self.value().len();
        self.sum().scale(T::one() / T::from_usize(n).expect("count"))
    }

    /// Sums broadcast axes away so the result has `shape`.
    pub fn sum_to(self, shape: &[usize]) -> Result<Self> {
        let s = self.shape();
        if s == shape {
            return Ok(self);
        }
        if !kernels::broadcasts_to(shape, &s) {
            return Err(Error::shape("sum_to", format!("{s:?} -> {shape:?}")));
        }
        let v = kernels::sum_to(&self.value(), shape);
        Ok(self.unary(Op::SumTo, v))
    }

    /// Sum over the last axis, keeping it with extent 1.
    pub fn sum_last_keepdim(self) -> Self {
        let mut s = self.shape();
        if let Some(last) = s.last_mut() {
            *last = 1;
        }
        self.sum_to(&s).expect("keepdim shape broadcasts")
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Self> {
        let s = self.shape();
        if s == shape {
            return Ok(self);
        }
        if !kernels::broadcasts_to(&s, shape) {
            return Err(Error::shape("broadcast_to", format!("{s:?} -> {shape:?}")));
        }
        let v = kernels::broadcast_to(&self.value(), shape);
        Ok(self.unary(Op::BroadcastTo, v))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let v = (*self.value()).clone().reshape(shape.to_vec())?;
        Ok(self.unary(Op::Reshape, v))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(self) -> Result<Self> {
        let s = self.shape();
        let rest: usize = s[1..].iter().product();
        self.reshape(&[s[0], rest])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero variables"))?;
        let s0 = first.shape();
        for p in parts {
            same_tape(first, p);
            let s = p.shape();
            let ok = s.len() == s0.len()
                && axis < s.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s0:?} and {s:?} on axis {axis}")));
            }
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let v = kernels::concat(&refs, axis);
        Ok(first
            .tape
            .push(Op::Concat { axis }, parts.iter().map(|p| p.id).collect(), v))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let s = self.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("{s:?} axis {axis} range {start}..{}", start + len),
            ));
        }
        let v = kernels::slice(&self.value(), axis, start, len);
        Ok(self.unary(Op::Slice { axis, start }, v))
    }

    fn embed(self, axis: usize, start: usize, total: usize) -> Self {
        let v = kernels::embed(&self.value(), axis, start, total);
        self.unary(Op::Embed { axis, start }, v)
    }

    /// Identity forward; backward maps the upstream gradient `u` to
    /// `-lambda · u`.
    pub fn gradient_reversal(self, lambda: T) -> Self {
        let v = (*self.value()).clone();
        self.unary(Op::Reverse(lambda), v)
    }

    /// Identity forward; backward multiplies the upstream gradient
    /// elementwise by `scale` (broadcast over leading axes). No gradient
    /// flows into `scale`.
    pub fn backward_scale(self, scale: Var<'t, T>) -> Result<Self> {
        same_tape(&self, &scale);
        let (s, k) = (self.shape(), scale.shape());
        if !kernels::broadcasts_to(&k, &s) {
            return Err(Error::shape("backward_scale", format!("{s:?} scaled by {k:?}")));
        }
        let v = (*self.value()).clone();
        Ok(self.tape.push(Op::BackwardScale, vec![self.id, scale.id], v))
    }
}

impl<T: Scalar> Tape<T> {
    fn mask<'t>(&'t self, x: NodeId, f: impl Fn(T) -> T) -> Var<'t, T> {
        let m = self.var(x).value().map(f);
        self.constant(m)
    }

    /// Parent gradients of node `id` given its upstream gradient `g`.
    /// Entries are `None` where `want` is false or the gradient is
    /// structurally absent.
    pub(super) fn node_vjp<'t>(
        &'t self,
        id: NodeId,
        op: &Op<T>,
        parents: &[NodeId],
        want: &[bool],
        g: Var<'t, T>,
    ) -> Result<Vec<Option<Var<'t, T>>>> {
        let p = |i: usize| self.var(parents[i]);
        let out = self.var(id);
        let zero = T::zero();
        let one = T::one();
        let grads = match op {
            Op::Leaf => vec![],
            Op::Add => vec![Some(g), Some(g)],
            Op::Sub => vec![Some(g), want[1].then(|| g.neg())],
            Op::Mul => vec![
                if want[0] { Some(g.mul(p(1))?) } else { None },
                if want[1] { Some(g.mul(p(0))?) } else { None },
            ],
            Op::Div => vec![
                if want[0] { Some(g.div(p(1))?) } else { None },
                if want[1] { Some(g.mul(out)?.div(p(1))?.neg()) } else { None },
            ],
            Op::Neg => vec![Some(g.neg())],
            Op::Scale(c) => vec![Some(g.scale(*c))],
            Op::MatMul => vec![
                if want[0] { Some(g.matmul(p(1).transpose()?)?) } else { None },
                if want[1] { Some(p(0).transpose()?.matmul(g)?) } else { None },
            ],
            Op::Transpose => vec![Some(g.transpose()?)],
            Op::Conv2d { stride } => {
                let xs = p(0).shape();
                vec![
                    want[0].then(|| g.conv2d_input_grad(p(1), *stride, (xs[2], xs[3]))),
                    want[1].then(|| Var::conv2d_weight_grad(p(0), g, *stride)),
                ]
            }
            Op::ConvInputGrad { stride, .. } => vec![
                if want[0] { Some(g.conv2d(p(1), *stride)?) } else { None },
                want[1].then(|| Var::conv2d_weight_grad(g, p(0), *stride)),
            ],
            Op::ConvWeightGrad { stride } => {
                let xs = p(0).shape();
                vec![
                    want[0].then(|| p(1).conv2d_input_grad(g, *stride, (xs[2], xs[3]))),
                    if want[1] { Some(p(0).conv2d(g, *stride)?) } else { None },
                ]
            }
            Op::Relu => {
                let m = self.mask(parents[0], |a| if a > zero { one } else { zero });
                vec![Some(g.mul(m)?)]
            }
            Op::LeakyRelu(slope) => {
                let s = *slope;
                let m = self.mask(parents[0], |a| if a > zero { one } else { s });
                vec![Some(g.mul(m)?)]
            }
            Op::Abs => {
                let m = self.mask(parents[0], |a| {
                    if a > zero {
                        one
                    } else if a < zero {
                        -one
                    } else {
                        zero
                    }
                });
                vec![Some(g.mul(m)?)]
            }
            Op::ClampMin(floor) => {
                let f = *floor;
                let m = self.mask(parents[0], |a| if a > f { one } else { zero });
                vec![Some(g.mul(m)?)]
            }
            Op::Exp => vec![Some(g.mul(out)?)],
            Op::Log => vec![Some(g.div(p(0))?)],
            Op::Sqrt => vec![Some(g.div(out)?.scale(T::lit(0.5)))],
            Op::Softmax => {
                let inner = g.mul(out)?.sum_last_keepdim();
                vec![Some(out.mul(g.sub(inner)?)?)]
            }
            Op::LogSoftmax => {
                let total = g.sum_last_keepdim();
                vec![Some(g.sub(out.exp().mul(total)?)?)]
            }
            Op::Sum | Op::SumTo => vec![Some(g.broadcast_to(&p(0).shape())?)],
            Op::BroadcastTo => vec![Some(g.sum_to(&p(0).shape())?)],
            Op::Reshape => vec![Some(g.reshape(&p(0).shape())?)],
            Op::Concat { axis } => {
                let mut offset = 0;
                let mut v = Vec::with_capacity(parents.len());
                for (i, &pid) in parents.iter().enumerate() {
                    let len = self.var(pid).shape()[*axis];
                    v.push(if want[i] { Some(g.slice(*axis, offset, len)?) } else { None });
                    offset += len;
                }
                v
            }
            Op::Slice { axis, start } => {
                let total = p(0).shape()[*axis];
                vec![Some(g.embed(*axis, *start, total))]
            }
            Op::Embed { axis, start } => {
                let len = p(0).shape()[*axis];
                vec![Some(g.slice(*axis, *start, len)?)]
            }
            Op::Reverse(lambda) => vec![Some(g.scale(-*lambda))],
            Op::BackwardScale => vec![Some(g.mul(p(1))?), None],
        };
        Ok(grads)
    }
}
