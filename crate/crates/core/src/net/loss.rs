//! Losses and their analytic gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Smallest probability used when a true-class probability underflows.
pub const PROB_FLOOR: f64 = 1e-300;

/// How per-sample losses are combined over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    /// Summing keeps each sample's input gradient at per-sample scale.
    Sum,
}

pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} outside [0, {classes})")));
        }
        data[i * classes + y] = T::one();
    }
    Tensor::new(vec![labels.len(), classes], data)
}

fn check_logits<T: Scalar>(logits: &Var<'_, T>, labels: &[usize]) -> Result<usize> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("logits {s:?} for {} labels", labels.len()),
        ));
    }
    Ok(s[1])
}

/// `−log softmax(logits)[y]` combined over the batch.
pub fn cross_entropy<'t, T: Scalar>(
    logits: Var<'t, T>,
    labels: &[usize],
    reduction: Reduction,
) -> Result<Var<'t, T>> {
    let classes = check_logits(&logits, labels)?;
    let picked = logits.log_softmax().mul_const(&one_hot(labels, classes)?)?.sum();
    Ok(match reduction {
        Reduction::Sum => picked.neg(),
        Reduction::Mean => picked.scale(-T::one() / T::from_usize(labels.len()).expect("batch")),
    })
}

/// Batch-mean softmax cross-entropy.
pub fn softmax_cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    cross_entropy(logits, labels, Reduction::Mean)
}

/// Cross-entropy evaluated from probabilities: `−log a[y]`, with the true
/// class probability clamped to [`PROB_FLOOR`].
pub fn cross_entropy_from_probs<'t, T: Scalar>(
    probs: Var<'t, T>,
    labels: &[usize],
    reduction: Reduction,
) -> Result<Var<'t, T>> {
    let classes = check_logits(&probs, labels)?;
    let p = probs.value();
    for (i, &y) in labels.iter().enumerate() {
        if p.data()[i * classes + y] < T::lit(PROB_FLOOR) {
            log::warn!("true-class probability underflow at sample {i}; clamped");
        }
    }
    let picked = probs
        .clamp_min(T::lit(PROB_FLOOR))
        .log()
        .mul_const(&one_hot(labels, classes)?)?
        .sum();
    Ok(match reduction {
        Reduction::Sum => picked.neg(),
        Reduction::Mean => picked.scale(-T::one() / T::from_usize(labels.len()).expect("batch")),
    })
}

/// Analytic `∂C/∂logits = (softmax(logits) − onehot(y)) / batch` for the
/// batch-mean loss.
pub fn ce_grad_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let classes = logits.shape()[1];
    let p = crate::kernels::softmax_last(logits);
    let oh = one_hot::<T>(labels, classes)?;
    let b = T::from_usize(labels.len()).expect("batch");
    p.zip_map(&oh, |a, o| (a - o) / b)
}

/// Analytic `∂C/∂a` with respect to the probabilities `a`: `−1/a_y` at
/// the true class (divided by the batch size under [`Reduction::Mean`]),
/// zero elsewhere.
pub fn ce_grad_probs<T: Scalar>(probs: &Tensor<T>, labels: &[usize], reduction: Reduction) -> Result<Tensor<T>> {
    let classes = probs.shape()[1];
    let b = match reduction {
        Reduction::Mean => T::from_usize(labels.len()).expect("batch"),
        Reduction::Sum => T::one(),
    };
    let mut g = vec![T::zero(); probs.len()];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} outside [0, {classes})")));
        }
        let mut a = probs.data()[i * classes + y];
        if a < T::lit(PROB_FLOOR) {
            log::warn!("true-class probability {a} at sample {i} clamped");
            a = T::lit(PROB_FLOOR);
        }
        g[i * classes + y] = -T::one() / (b * a);
    }
    Tensor::new(probs.shape().to_vec(), g)
}

/// Mean squared error over all elements.
pub fn mse<'t, T: Scalar>(prediction: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape(
            "mse",
            format!("{:?} vs {:?}", prediction.shape(), target.shape()),
        ));
    }
    let d = prediction.sub(target)?;
    Ok(d.mul(d)?.mean())
}

/// `1 − |cos(prediction_i, target_i)|`, averaged over the batch; each
/// sample is flattened to a vector.
pub fn cosine_loss<'t, T: Scalar>(prediction: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape(
            "cosine_loss",
            format!("{:?} vs {:?}", prediction.shape(), target.shape()),
        ));
    }
    let p = prediction.flatten()?;
    let t = target.flatten()?;
    let batch = p.shape()[0];
    let norm = |v: Var<'t, T>| v.mul(v).map(|s| s.sum_last_keepdim().sqrt());
    let (np, nt) = (norm(p)?, norm(t)?);
    for (which, n) in [("prediction", &np), ("target", &nt)] {
        if n.value().data().iter().any(|v| *v == T::zero()) {
            return Err(Error::invalid(format!("cosine_loss: zero-norm {which} vector")));
        }
    }
    let cos = p.mul(t)?.sum_last_keepdim().div(np.mul(nt)?)?;
    let per = cos.abs().neg().add_scalar(T::one());
    Ok(per.sum().scale(T::one() / T::from_usize(batch).expect("batch")))
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / labels.len() as f64
}
