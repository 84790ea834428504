//! Adversarial defense: the main classifier trains against an auxiliary
//! network that tries to recover the label from the main network's input
//! gradients, with a cross-entropy whose output gradient is pushed toward
//! the classes the auxiliary network confuses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::loss::{accuracy, ce_grad_probs, cross_entropy, cross_entropy_from_probs, one_hot};
use crate::net::{Model, Optimizer, Reduction};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{apply, values};

fn default_alpha_max() -> f64 {
    1.0
}

fn default_beta_max() -> f64 {
    2.0
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreaceConfig {
    /// Ceiling of the gradient-reversal weight α.
    #[serde(default = "default_alpha_max")]
    pub alpha_max: f64,
    /// Ceiling of the negative-class penalty β.
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
    /// Keep only the true-class component of `∂C/∂a` before
    /// backpropagating to the input.
    #[serde(default = "default_true")]
    pub masked: bool,
    /// Scale every sample's gradient to unit L2 norm before the auxiliary
    /// network sees it.
    #[serde(default)]
    pub normalize: bool,
}

impl Default for GreaceConfig {
    fn default() -> Self {
        Self {
            alpha_max: default_alpha_max(),
            beta_max: default_beta_max(),
            masked: true,
            normalize: false,
        }
    }
}

impl GreaceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_max >= 0.0 && self.beta_max >= 0.0) {
            return Err(Error::Config(format!(
                "alpha_max and beta_max must be non-negative, got {} and {}",
                self.alpha_max, self.beta_max
            )));
        }
        Ok(())
    }
}

/// Diagnostics of one defense step.
#[derive(Clone, Debug, PartialEq)]
pub struct DefenseStepReport {
    pub alpha: f64,
    pub beta: f64,
    pub main_loss: f64,
    pub main_accuracy: f64,
    pub aux_loss: f64,
    pub aux_accuracy: f64,
    /// Mean per-sample L2 norm of the input gradient.
    pub grad_norm: f64,
    /// Norm of the reversed signal at each parameterized layer, input side
    /// first.
    pub probe: Vec<f64>,
}

/// Input gradient of the per-sample loss, built on the tape.
pub struct InputGradient<'t, T> {
    pub logits: Var<'t, T>,
    pub probs: Var<'t, T>,
    /// Per-sample `∂C_i/∂x_i`, shaped like `x`.
    pub g: Var<'t, T>,
    /// `∂C/∂z` for the pre-activation output `z` of every parameterized
    /// layer, input side first.
    pub deltas: Vec<Var<'t, T>>,
}

/// Zeroes every entry of a `[batch, classes]` gradient except the
/// true-class one.
pub fn mask_true_class<T: Scalar>(grad: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let classes = *grad.shape().last().unwrap_or(&0);
    grad.zip_map(&one_hot(labels, classes)?, |g, m| g * m)
}

/// Backpropagates `∂C/∂a` from the softmax output `a` down to `x`, where
/// `C` is the summed cross-entropy so every sample keeps its own scale.
/// With `masked`, only the true-class component of `∂C/∂a` is used, which
/// for plain cross-entropy is the whole gradient. `x` must be a
/// differentiable leaf; the result is differentiable with respect to the
/// parameters and `x`.
pub fn masked_input_gradient<'t, T: Scalar>(
    model: &Model<T>,
    params: &[Var<'t, T>],
    x: Var<'t, T>,
    labels: &[usize],
    masked: bool,
) -> Result<InputGradient<'t, T>> {
    input_gradient(model, params, x, labels, masked, true)
}

fn input_gradient<'t, T: Scalar>(
    model: &Model<T>,
    params: &[Var<'t, T>],
    x: Var<'t, T>,
    labels: &[usize],
    masked: bool,
    create_graph: bool,
) -> Result<InputGradient<'t, T>> {
    let tape = x.tape();
    let (logits, taps) = model.forward_taps(x, params)?;
    let probs = logits.softmax();
    let loss = cross_entropy_from_probs(probs, labels, Reduction::Sum)?;
    let mut ga = tape.backward(loss, &[probs], create_graph)?[0];
    if masked {
        ga = ga.mul_const(&one_hot(labels, logits.shape()[1])?)?;
    }
    let mut wrt = vec![x];
    wrt.extend_from_slice(&taps);
    let mut grads = tape.vjp(probs, ga, &wrt, create_graph)?;
    let g = grads.remove(0);
    Ok(InputGradient {
        logits,
        probs,
        g,
        deltas: grads,
    })
}

/// `∂Ĉ/∂a = ∂C/∂a + β·σ(á)` at every class other than the label; the
/// true-class entry is left untouched.
pub fn greace_output_gradient<T: Scalar>(
    grad_a: &Tensor<T>,
    aux_probs: &Tensor<T>,
    labels: &[usize],
    beta: f64,
) -> Result<Tensor<T>> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("beta must be non-negative, got {beta}")));
    }
    if grad_a.shape() != aux_probs.shape() || grad_a.shape().len() != 2 || grad_a.shape()[0] != labels.len() {
        return Err(Error::shape(
            "greace_output_gradient",
            format!("{:?}, {:?} for {} labels", grad_a.shape(), aux_probs.shape(), labels.len()),
        ));
    }
    let classes = grad_a.shape()[1];
    for (i, row) in aux_probs.data().chunks(classes).enumerate() {
        let total: f64 = row.iter().map(|p| p.to_f64().unwrap_or(f64::NAN)).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("auxiliary probabilities of sample {i} sum to {total}")));
        }
    }
    let b = T::lit(beta);
    let mut out = grad_a.clone();
    for (i, &y) in labels.iter().enumerate() {
        let row = &mut out.data_mut()[i * classes..(i + 1) * classes];
        for (j, v) in row.iter_mut().enumerate() {
            if j != y {
                *v = *v + b * aux_probs.data()[i * classes + j];
            }
        }
    }
    Ok(out)
}

/// Main classifier, auxiliary gradient classifier and their optimizers.
#[derive(Clone, Debug)]
pub struct DefenseState<T> {
    pub main: Model<T>,
    pub aux: Model<T>,
    pub main_opt: Optimizer<T>,
    pub aux_opt: Optimizer<T>,
}

/// Divides every sample (leading axis) by its L2 norm.
fn normalize_per_sample<'t, T: Scalar>(g: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = g.shape();
    let flat = g.flatten()?;
    let norm = flat.mul(flat)?.sum_last_keepdim().add_scalar(T::lit(1e-12)).sqrt();
    flat.div(norm)?.reshape(&shape)
}

fn per_sample_norm<T: Scalar>(g: &Tensor<T>) -> f64 {
    let n = g.batch();
    let row = g.len() / n.max(1);
    g.data()
        .chunks(row.max(1))
        .map(|r| r.iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n.max(1) as f64
}

fn as_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

struct StepGrads<T> {
    main: Vec<Tensor<T>>,
    aux: Vec<Tensor<T>>,
    report: DefenseStepReport,
}

fn defense_grads<T: Scalar>(
    state: &DefenseState<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &GreaceConfig,
    alpha: f64,
    beta: f64,
) -> Result<StepGrads<T>> {
    let tape = Tape::new();
    let main_params = state.main.bind(&tape);
    let aux_params = state.aux.bind(&tape);
    let xv = tape.leaf(x.clone());
    let ig = masked_input_gradient(&state.main, &main_params, xv, labels, cfg.masked)?;
    let g = if cfg.normalize { normalize_per_sample(ig.g)? } else { ig.g };

    let aux_logits = state.aux.forward(g.gradient_reversal(T::lit(alpha)), &aux_params)?;
    let aux_loss = cross_entropy(aux_logits, labels, Reduction::Mean)?;
    let aux_probs = crate::kernels::softmax_last(&aux_logits.value());

    let probs = ig.probs.value();
    let b = T::from_usize(labels.len()).expect("batch");
    let seed = greace_output_gradient(&ce_grad_probs(&probs, labels, Reduction::Sum)?, &aux_probs, labels, beta)?
        .map(|v| v / b);
    let total = ig.probs.mul_const(&seed)?.sum().add(aux_loss)?;
    tape.check_finite()?;

    let mut wrt = main_params.clone();
    wrt.extend_from_slice(&aux_params);
    wrt.extend_from_slice(&ig.deltas);
    let mut grads = values(&tape.backward(total, &wrt, false)?);
    let probe = grads.split_off(main_params.len() + aux_params.len());
    let aux = grads.split_off(main_params.len());

    let main_loss = as_f64(cross_entropy_from_probs(ig.probs, labels, Reduction::Mean)?.item());
    let report = DefenseStepReport {
        alpha,
        beta,
        main_loss,
        main_accuracy: accuracy(&ig.logits.value(), labels),
        aux_loss: as_f64(aux_loss.item()),
        aux_accuracy: accuracy(&aux_logits.value(), labels),
        grad_norm: per_sample_norm(&ig.g.value()),
        probe: probe.iter().map(|p| as_f64(p.norm())).collect(),
    };
    Ok(StepGrads { main: grads, aux, report })
}

/// One joint step. The auxiliary network is updated first from its own
/// loss; the main network then receives the GREACE output gradient plus
/// the reversed auxiliary gradient (weight `alpha`) through its input
/// gradient. Both updates use the parameters from before the step.
pub fn defense_train_step<T: Scalar>(
    state: &mut DefenseState<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &GreaceConfig,
    alpha: f64,
    beta: f64,
) -> Result<DefenseStepReport> {
    let StepGrads { main, aux, report } = defense_grads(state, x, labels, cfg, alpha, beta)?;
    for (what, v) in [("main loss", report.main_loss), ("auxiliary loss", report.aux_loss)] {
        if !v.is_finite() {
            return Err(Error::Diverged(format!("{what} is {v}; step aborted")));
        }
    }
    apply(&mut state.aux, &mut state.aux_opt, &aux)?;
    apply(&mut state.main, &mut state.main_opt, &main)?;
    Ok(report)
}

/// The reversed signal `ϱ` at every parameterized layer of `model`
/// (input side first): the adjoint of each layer's `∂C/∂z` when the
/// auxiliary loss is backpropagated through the input gradient with
/// reversal weight `lambda`.
pub fn reversed_signal_probe<T: Scalar>(
    model: &Model<T>,
    aux: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
    masked: bool,
) -> Result<Vec<Tensor<T>>> {
    let tape = Tape::new();
    let params = model.bind_frozen(&tape);
    let aux_params = aux.bind_frozen(&tape);
    let ig = masked_input_gradient(model, &params, tape.leaf(x.clone()), labels, masked)?;
    let logits = aux.forward(ig.g.gradient_reversal(T::lit(lambda)), &aux_params)?;
    let loss = cross_entropy(logits, labels, Reduction::Mean)?;
    Ok(values(&tape.backward(loss, &ig.deltas, false)?))
}

/// Input gradients for a whole dataset, without graph construction.
pub fn gradient_batch<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    masked: bool,
    normalize: bool,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let params = model.bind_frozen(&tape);
    let ig = input_gradient(model, &params, tape.leaf(x.clone()), labels, masked, false)?;
    let g = if normalize { normalize_per_sample(ig.g)? } else { ig.g };
    tape.check_finite()?;
    Ok((*g.value()).clone())
}

/// Accuracy of the auxiliary network at recovering labels from the main
/// network's input gradients.
pub fn gradient_classifier_accuracy<T: Scalar>(
    state: &DefenseState<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &GreaceConfig,
    batch: usize,
) -> Result<f64> {
    let n = labels.len();
    let mut hits = 0.0;
    for start in (0..n).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..n.min(start + batch.max(1))).collect();
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let g = gradient_batch(&state.main, &x.select(&idx), &y, cfg.masked, cfg.normalize)?;
        hits += accuracy(&state.aux.predict(&g)?, &y) * y.len() as f64;
    }
    Ok(if n == 0 { 0.0 } else { hits / n as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, Architecture, OptimizerConfig, OptimizerKind};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn greace_examples() {
        let g = t(&[1, 3], &[-2.0, 0.0, 0.0]);
        let p = t(&[1, 3], &[0.2, 0.3, 0.5]);
        let out = greace_output_gradient(&g, &p, &[0], 2.0).unwrap();
        assert_eq!(out.data(), &[-2.0, 0.6, 1.0]);
        assert_eq!(greace_output_gradient(&g, &p, &[0], 0.0).unwrap(), g);
        assert!(greace_output_gradient(&g, &p, &[0], -1.0).is_err());
        let bad = t(&[1, 3], &[0.2, 0.3, 0.6]);
        assert!(greace_output_gradient(&g, &bad, &[0], 1.0).is_err());

        let zero = Tensor::<f64>::zeros(vec![1, 10]);
        let uniform = Tensor::full(vec![1, 10], 0.1);
        let out = greace_output_gradient(&zero, &uniform, &[3], 10.0).unwrap();
        for (j, v) in out.data().iter().enumerate() {
            let expected = if j == 3 { 0.0 } else { 1.0 };
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn mask_keeps_only_the_label() {
        let g = t(&[1, 3], &[-2.0, 0.6, 1.0]);
        assert_eq!(mask_true_class(&g, &[0]).unwrap().data(), &[-2.0, 0.0, 0.0]);
    }

    fn linear(d: usize, k: usize, seed: u64) -> Model<f64> {
        Model::new(
            Architecture::Mlp {
                dims: vec![d, k],
                activation: Activation::Relu,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn masked_gradient_matches_symbolic_chain_rule() {
        // logits = x W + b with x ∈ R^2 and 3 classes; ∂(−log a_y)/∂x = W (a − e_y).
        let mut model = linear(2, 3, 0);
        let w = [0.4, -0.3, 1.1, -0.7, 0.2, 0.5];
        let bias = [0.1, 0.0, -0.2];
        model.set_tensors(vec![t(&[2, 3], &w), t(&[3], &bias)]).unwrap();
        let x = [0.6, -1.3];
        let y = 2;
        let z: Vec<f64> = (0..3).map(|k| x[0] * w[k] + x[1] * w[3 + k] + bias[k]).collect();
        let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let s: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|v| v / s).collect();
        let expected: Vec<f64> = (0..2)
            .map(|j| (0..3).map(|k| w[j * 3 + k] * (a[k] - f64::from(k == y))).sum())
            .collect();

        let tape = Tape::new();
        let params = model.bind(&tape);
        let ig = masked_input_gradient(&model, &params, tape.leaf(t(&[1, 2], &x)), &[y], true).unwrap();
        for (got, want) in ig.g.value().data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        let unmasked = gradient_batch(&model, &t(&[1, 2], &x), &[y], false, false).unwrap();
        assert_eq!(*ig.g.value(), unmasked);
    }

    #[test]
    fn zero_weights_reduce_to_plain_cross_entropy() {
        let main = linear(3, 4, 1);
        let aux = linear(3, 4, 2);
        let cfg = OptimizerConfig {
            kind: OptimizerKind::sgd(),
            lr: 0.5,
        };
        let mut state = DefenseState {
            main_opt: Optimizer::new(cfg, &main.tensors()),
            aux_opt: Optimizer::new(cfg, &aux.tensors()),
            main: main.clone(),
            aux,
        };
        let x = t(&[4, 3], &[0.1, 0.5, -0.3, 0.9, 1.0, -1.0, 0.2, 0.0, 0.4, 0.4, -0.8, 0.3]);
        let y = [0, 3, 1, 1];
        let report = defense_train_step(&mut state, &x, &y, &GreaceConfig::default(), 0.0, 0.0).unwrap();
        assert!(report.probe.iter().all(|p| *p == 0.0));

        let mut baseline = main;
        let mut opt = Optimizer::new(cfg, &baseline.tensors());
        crate::train::supervised_step(&mut baseline, &mut opt, &x, &y).unwrap();
        for (a, b) in state.main.tensors().iter().zip(baseline.tensors()) {
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }
}
