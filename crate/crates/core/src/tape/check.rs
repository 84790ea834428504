//! Central-difference gradient checks.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn relative_error<T: Scalar>(tape_grad: T, fd_grad: T) -> T {
    (tape_grad - fd_grad).abs() / fd_grad.abs().max(T::lit(1e-8))
}

fn eval_scalar<T, F>(f: &F, x: Tensor<T>) -> Result<T>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let out = f(&tape, tape.constant(x))?;
    let v = out.item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            node: out.id(),
            op: "finite_difference_check",
        });
    }
    Ok(v)
}

fn eval_grad<T, F>(f: &F, x: Tensor<T>) -> Result<Tensor<T>>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x);
    let out = f(&tape, xv)?;
    let g = tape.backward(out, &[xv], false)?;
    Ok((*g[0].value()).clone())
}

fn perturbed<T: Scalar>(x: &Tensor<T>, i: usize, delta: T) -> Tensor<T> {
    let mut p = x.clone();
    p.data_mut()[i] = p.data()[i] + delta;
    p
}

/// Largest relative disagreement between the tape gradient of the scalar
/// function `f` at `x` and central differences with step `h`:
/// `max_i |g_tape − g_fd| / max(|g_fd|, 1e-8)`.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<T>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let grad = eval_grad(&f, x.clone())?;
    let two_h = h + h;
    let mut worst = T::zero();
    for i in 0..x.len() {
        let fp = eval_scalar(&f, perturbed(x, i, h))?;
        let fm = eval_scalar(&f, perturbed(x, i, -h))?;
        worst = worst.max(relative_error(grad.data()[i], (fp - fm) / two_h));
    }
    Ok(worst)
}

/// Checks the second-order path: the tape's Hessian-vector product
/// `∇(v · ∇f)` against central differences of `v · ∇f` (first-order
/// gradients evaluated at `x ± h·e_i`). Returns the largest relative error.
pub fn hessian_vector_check<T, F>(f: F, x: &Tensor<T>, v: &Tensor<T>, h: T) -> Result<T>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    if v.shape() != x.shape() {
        return Err(Error::shape(
            "hessian_vector_check",
            format!("{:?} vs {:?}", x.shape(), v.shape()),
        ));
    }
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&tape, xv)?;
    let g = tape.backward(out, &[xv], true)?[0];
    let s = g.mul_const(v)?.sum();
    let hv = tape.backward(s, &[xv], false)?[0].value();

    let dot = |t: &Tensor<T>| -> T { t.data().iter().zip(v.data()).map(|(&a, &b)| a * b).sum() };
    let two_h = h + h;
    let mut worst = T::zero();
    for i in 0..x.len() {
        let gp = dot(&eval_grad(&f, perturbed(x, i, h))?);
        let gm = dot(&eval_grad(&f, perturbed(x, i, -h))?);
        worst = worst.max(relative_error(hv.data()[i], (gp - gm) / two_h));
    }
    Ok(worst)
}

/// Pins a closure to the higher-ranked signature the checks expect, so it
/// can be bound to a variable and reused.
pub fn objective<T, F>(f: F) -> F
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    f
}
