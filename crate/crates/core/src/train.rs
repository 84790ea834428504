//! Shared training helpers: gradient extraction, supervised steps and
//! batched evaluation.

use crate::error::Result;
use crate::net::loss::{accuracy, softmax_cross_entropy};
use crate::net::{Model, Optimizer, StepOutcome};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Values of `vars`, cloned out of the tape.
pub fn values<T: Scalar>(vars: &[Var<'_, T>]) -> Vec<Tensor<T>> {
    vars.iter().map(|v| (*v.value()).clone()).collect()
}

/// First-order gradients of `loss` with respect to `params`.
pub fn grads<'t, T: Scalar>(tape: &'t Tape<T>, loss: Var<'t, T>, params: &[Var<'t, T>]) -> Result<Vec<Tensor<T>>> {
    Ok(values(&tape.backward(loss, params, false)?))
}

/// Applies `grads` to the model's parameters.
pub fn apply<T: Scalar>(model: &mut Model<T>, opt: &mut Optimizer<T>, grads: &[Tensor<T>]) -> Result<StepOutcome> {
    let mut params = model.tensors();
    let outcome = opt.step(&mut params, grads)?;
    if outcome == StepOutcome::Applied {
        model.set_tensors(params)?;
    }
    Ok(outcome)
}

/// Loss and accuracy of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Gradients of the batch-mean cross-entropy with respect to the model
/// parameters.
pub fn supervised_grads<T: Scalar>(model: &Model<T>, x: &Tensor<T>, y: &[usize]) -> Result<(Vec<Tensor<T>>, StepStats)> {
    let tape = Tape::new();
    let params = model.bind(&tape);
    let logits = model.forward(tape.constant(x.clone()), &params)?;
    let loss = softmax_cross_entropy(logits, y)?;
    tape.check_finite()?;
    let stats = StepStats {
        loss: loss.item().to_f64().unwrap_or(f64::NAN),
        accuracy: accuracy(&logits.value(), y),
    };
    Ok((grads(&tape, loss, &params)?, stats))
}

/// One plain cross-entropy step.
pub fn supervised_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    x: &Tensor<T>,
    y: &[usize],
) -> Result<StepStats> {
    let (g, stats) = supervised_grads(model, x, y)?;
    apply(model, opt, &g)?;
    Ok(stats)
}

/// Logits for `x`, evaluated in chunks of `batch` rows.
pub fn predict_batched<T: Scalar>(model: &Model<T>, x: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
    let n = x.batch();
    let step = batch.max(1);
    let mut data = Vec::new();
    let mut classes = Vec::new();
    for start in (0..n).step_by(step) {
        let idx: Vec<usize> = (start..n.min(start + step)).collect();
        let out = model.predict(&x.select(&idx))?;
        classes = out.shape()[1..].to_vec();
        data.extend_from_slice(out.data());
    }
    let mut shape = vec![n];
    shape.extend(classes);
    Tensor::new(shape, data)
}

/// Classification accuracy over a dataset.
pub fn evaluate<T: Scalar>(model: &Model<T>, x: &Tensor<T>, y: &[usize], batch: usize) -> Result<f64> {
    Ok(accuracy(&predict_batched(model, x, batch)?, y))
}

/// Total squared gradient norm, for diagnostics.
pub fn grad_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .map(|g| g.norm().to_f64().unwrap_or(f64::NAN).powi(2))
        .sum::<f64>()
        .sqrt()
}
