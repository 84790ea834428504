//! Knowledge distillation by gradient discrimination: a discriminator
//! learns to tell the student's input gradients from a frozen teacher's,
//! and the student receives its reversed signal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::loss::{accuracy, cross_entropy};
use crate::net::{Activation, Architecture, Model, Optimizer, Reduction};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{apply, values, StepStats};

/// Label of teacher gradients for the discriminator.
pub const TEACHER: usize = 1;
/// Label of student gradients for the discriminator.
pub const STUDENT: usize = 0;

/// Probability clamp used by [`discriminator_loss`].
pub const PROB_CLAMP: f64 = 1e-12;

fn default_alpha() -> f64 {
    0.1
}

fn default_temperature() -> f64 {
    20.0
}

fn default_mix() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Balance between the supervised loss and the reversed discriminator
    /// signal.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Soft-target baseline temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Soft-target baseline weight of the KL term.
    #[serde(default = "default_mix")]
    pub mix: f64,
    /// Standardize each gradient sample (zero mean, unit variance) before
    /// the discriminator sees it.
    #[serde(default)]
    pub standardize: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            temperature: default_temperature(),
            mix: default_mix(),
            standardize: false,
        }
    }
}

impl DistillConfig {
    /// Defaults for training on a small fraction of the data.
    pub fn sparse() -> Self {
        Self {
            mix: 0.99,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.mix) {
            return Err(Error::Config(format!(
                "alpha and mix must lie in [0, 1], got {} and {}",
                self.alpha, self.mix
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Student topology with half the depth, leaky ReLU and two outputs.
pub fn discriminator_architecture(student: &Architecture) -> Architecture {
    match student {
        Architecture::ResNet {
            input,
            width,
            blocks,
            downsample,
            ..
        } => Architecture::ResNet {
            input: *input,
            width: *width,
            blocks: (blocks / 2).max(1),
            classes: Some(2),
            downsample: *downsample,
            activation: Activation::AUXILIARY,
        },
        Architecture::Mlp { dims, .. } => {
            let hidden = &dims[1..dims.len() - 1];
            let mut d = vec![dims[0]];
            d.extend_from_slice(&hidden[..hidden.len() / 2]);
            d.push(2);
            Architecture::Mlp {
                dims: d,
                activation: Activation::AUXILIARY,
            }
        }
        other => other.clone(),
    }
}

/// Empirical `E log f(t) + E log(1 − f(s))` from the discriminator's
/// teacher-class probabilities, each clamped to `[1e-12, 1 − 1e-12]`.
pub fn discriminator_loss(f_teacher: &[f64], f_student: &[f64]) -> Result<f64> {
    if f_teacher.is_empty() || f_student.is_empty() {
        return Err(Error::invalid("discriminator_loss needs samples on both sides"));
    }
    let c = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let t = f_teacher.iter().map(|&p| c(p).ln()).sum::<f64>() / f_teacher.len() as f64;
    let s = f_student.iter().map(|&p| (1.0 - c(p)).ln()).sum::<f64>() / f_student.len() as f64;
    Ok(t + s)
}

/// `∇_x J(τ, x, y)` of the teacher's summed cross-entropy on the true
/// labels, without graph construction.
pub fn teacher_gradient<T: Scalar>(teacher: &Model<T>, x: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    crate::attacks::input_loss_gradient(teacher, x, labels)
}

fn standardize<'t, T: Scalar>(g: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = g.shape();
    let flat = g.flatten()?;
    let inv_d = T::one() / T::from_usize(flat.shape()[1]).expect("width");
    let centered = flat.sub(flat.sum_last_keepdim().scale(inv_d))?;
    let std = centered
        .mul(centered)?
        .sum_last_keepdim()
        .scale(inv_d)
        .add_scalar(T::lit(1e-12))
        .sqrt();
    centered.div(std)?.reshape(&shape)
}

fn prepare<'t, T: Scalar>(g: Var<'t, T>, cfg: &DistillConfig) -> Result<Var<'t, T>> {
    if cfg.standardize {
        standardize(g)
    } else {
        Ok(g)
    }
}

/// Student, frozen teacher, discriminator and the two optimizers.
#[derive(Clone, Debug)]
pub struct DistillState<T> {
    pub student: Model<T>,
    pub teacher: Model<T>,
    pub discriminator: Model<T>,
    pub student_opt: Optimizer<T>,
    pub disc_opt: Optimizer<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillStepReport {
    pub student_loss: f64,
    pub student_accuracy: f64,
    pub disc_loss: f64,
    /// Discriminator accuracy over the student and teacher gradients.
    pub disc_accuracy: f64,
    /// Empirical discriminator objective.
    pub d_value: f64,
}

fn teacher_prob<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    crate::kernels::softmax_last(logits)
        .data()
        .chunks(2)
        .map(|r| r[TEACHER].to_f64().unwrap_or(f64::NAN))
        .collect()
}

/// One step: the discriminator is updated from `Ĵ(g_t, 1) + Ĵ(g_s, 0)`,
/// then the student from `(1 − α)·∇C` plus the reversed, α-weighted
/// discriminator gradient through `g_s`. Both use pre-step parameters.
pub fn distill_train_step<T: Scalar>(
    state: &mut DistillState<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<DistillStepReport> {
    cfg.validate()?;
    let g_t = teacher_gradient(&state.teacher, x, labels)?;

    let tape = Tape::new();
    let sp = state.student.bind(&tape);
    let dp = state.discriminator.bind(&tape);
    let xv = tape.leaf(x.clone());
    let logits = state.student.forward(xv, &sp)?;
    let per_sample = cross_entropy(logits, labels, Reduction::Sum)?;
    let g_s = tape.backward(per_sample, &[xv], true)?[0];
    let loss = cross_entropy(logits, labels, Reduction::Mean)?;

    let s_in = prepare(g_s.gradient_reversal(T::lit(cfg.alpha)), cfg)?;
    let t_in = prepare(tape.constant(g_t), cfg)?;
    let s_logits = state.discriminator.forward(s_in, &dp)?;
    let t_logits = state.discriminator.forward(t_in, &dp)?;
    let n = labels.len();
    let disc_loss = cross_entropy(t_logits, &vec![TEACHER; n], Reduction::Mean)?
        .add(cross_entropy(s_logits, &vec![STUDENT; n], Reduction::Mean)?)?;
    let total = loss.scale(T::lit(1.0 - cfg.alpha)).add(disc_loss)?;
    tape.check_finite()?;

    let mut wrt = sp.clone();
    wrt.extend_from_slice(&dp);
    let mut grads = values(&tape.backward(total, &wrt, false)?);
    let disc_grads = grads.split_off(sp.len());

    let report = DistillStepReport {
        student_loss: loss.item().to_f64().unwrap_or(f64::NAN),
        student_accuracy: accuracy(&logits.value(), labels),
        disc_loss: disc_loss.item().to_f64().unwrap_or(f64::NAN),
        disc_accuracy: 0.5
            * (accuracy(&t_logits.value(), &vec![TEACHER; n]) + accuracy(&s_logits.value(), &vec![STUDENT; n])),
        d_value: discriminator_loss(&teacher_prob(&t_logits.value()), &teacher_prob(&s_logits.value()))?,
    };
    apply(&mut state.discriminator, &mut state.disc_opt, &disc_grads)?;
    apply(&mut state.student, &mut state.student_opt, &grads)?;
    Ok(report)
}

/// Classical soft-target step:
/// `(1 − mix)·CE + mix·T²·KL(softmax(teacher/T) ‖ softmax(student/T))`.
pub fn soft_target_baseline_step<T: Scalar>(
    student: &mut Model<T>,
    opt: &mut Optimizer<T>,
    teacher: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    temperature: f64,
    mix: f64,
) -> Result<StepStats> {
    let tape = Tape::new();
    let params = student.bind(&tape);
    let logits = student.forward(tape.constant(x.clone()), &params)?;
    let loss = soft_target_loss(logits, &teacher.predict(x)?, labels, temperature, mix)?;
    tape.check_finite()?;
    let stats = StepStats {
        loss: loss.item().to_f64().unwrap_or(f64::NAN),
        accuracy: accuracy(&logits.value(), labels),
    };
    let g = values(&tape.backward(loss, &params, false)?);
    apply(student, opt, &g)?;
    Ok(stats)
}

/// The soft-target objective on the tape.
pub fn soft_target_loss<'t, T: Scalar>(
    logits: Var<'t, T>,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    temperature: f64,
    mix: f64,
) -> Result<Var<'t, T>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let inv_t = T::lit(1.0 / temperature);
    let p_t = crate::kernels::softmax_last(&teacher_logits.map(|v| v * inv_t));
    let log_p_t = crate::kernels::log_softmax_last(&teacher_logits.map(|v| v * inv_t));
    let tape = logits.tape();
    let log_q = logits.scale(inv_t).log_softmax();
    let kl = tape
        .constant(log_p_t)
        .sub(log_q)?
        .mul_const(&p_t)?
        .sum()
        .scale(T::one() / T::from_usize(labels.len()).expect("batch"));
    let ce = cross_entropy(logits, labels, Reduction::Mean)?;
    ce.scale(T::lit(1.0 - mix))
        .add(kl.scale(T::lit(mix * temperature * temperature)))
}

/// Discriminator accuracy on held-out student and teacher gradients.
pub fn discriminator_accuracy<T: Scalar>(state: &DistillState<T>, x: &Tensor<T>, labels: &[usize], cfg: &DistillConfig) -> Result<f64> {
    let tape = Tape::new();
    let prep = |g: Tensor<T>| -> Result<Tensor<T>> {
        let v = tape.constant(g);
        let v = if cfg.standardize { standardize(v)? } else { v };
        Ok((*v.value()).clone())
    };
    let s = prep(teacher_gradient(&state.student, x, labels)?)?;
    let t = prep(teacher_gradient(&state.teacher, x, labels)?)?;
    let n = labels.len();
    let a_s = accuracy(&state.discriminator.predict(&s)?, &vec![STUDENT; n]);
    let a_t = accuracy(&state.discriminator.predict(&t)?, &vec![TEACHER; n]);
    Ok(0.5 * (a_s + a_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{OptimizerConfig, OptimizerKind};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn discriminator_loss_examples() {
        let d = discriminator_loss(&[0.5], &[0.5]).unwrap();
        assert!((d - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        let d = discriminator_loss(&[0.8], &[0.3]).unwrap();
        assert!((d - (0.8f64.ln() + 0.7f64.ln())).abs() < 1e-15);
        let d = discriminator_loss(&[1.0], &[0.0]).unwrap();
        assert!(d < 0.0 && d > -1e-11);
    }

    fn mlp(dims: &[usize], seed: u64) -> Model<f64> {
        Model::new(
            Architecture::Mlp {
                dims: dims.to_vec(),
                activation: Activation::Relu,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn linear_teacher_gradient_is_its_weight() {
        let mut teacher = mlp(&[2, 2], 0);
        teacher
            .set_tensors(vec![t(&[2, 2], &[0.0, 0.5, 0.0, -1.0]), Tensor::zeros(vec![2])])
            .unwrap();
        // Label 1 with logits [0, w·x]: ∂(−log a_1)/∂x = −(1 − a_1)·w.
        let x = t(&[1, 2], &[0.3, 0.2]);
        let g = teacher_gradient(&teacher, &x, &[1]).unwrap();
        let z = 0.5 * 0.3 - 0.2;
        let a1 = 1.0 / (1.0 + (-z as f64).exp());
        assert!((g.data()[0] + (1.0 - a1) * 0.5).abs() < 1e-14);
        assert!((g.data()[1] - (1.0 - a1) * 1.0).abs() < 1e-14);
    }

    #[test]
    fn soft_targets_vanish_for_identical_logits() {
        let tape = Tape::new();
        let logits = t(&[2, 3], &[0.1, 2.0, -1.0, 0.5, 0.5, 0.0]);
        let v = tape.constant(logits.clone());
        let kl_only = soft_target_loss(v, &logits, &[1, 0], 20.0, 1.0).unwrap();
        assert!(kl_only.item().abs() < 1e-15);
        let ce_only = soft_target_loss(v, &logits, &[1, 0], 20.0, 0.0).unwrap();
        let ce = cross_entropy(v, &[1, 0], Reduction::Mean).unwrap();
        assert_eq!(ce_only.item(), ce.item());
    }

    #[test]
    fn identical_networks_are_indistinguishable() {
        let student = mlp(&[3, 5, 2], 4);
        let arch = discriminator_architecture(student.architecture());
        let disc = Model::new(arch, 5).unwrap();
        let cfg = OptimizerConfig {
            kind: OptimizerKind::sgd(),
            lr: 0.1,
        };
        let mut state = DistillState {
            student_opt: Optimizer::new(cfg, &student.tensors()),
            disc_opt: Optimizer::new(cfg, &disc.tensors()),
            teacher: student.clone(),
            student,
            discriminator: disc,
        };
        let x = t(&[4, 3], &[0.1, 0.5, -0.3, 0.9, 1.0, -1.0, 0.2, 0.0, 0.4, 0.4, -0.8, 0.3]);
        let report = distill_train_step(&mut state, &x, &[0, 1, 1, 0], &DistillConfig::default()).unwrap();
        assert_eq!(report.disc_accuracy, 0.5);
        assert_eq!(discriminator_accuracy(&state, &x, &[0, 1, 1, 0], &DistillConfig::default()).unwrap(), 0.5);
    }

    #[test]
    fn discriminator_is_half_depth_leaky() {
        let arch = discriminator_architecture(&crate::net::build_resnet_small([1, 8, 8], 10, 8, 4));
        match arch {
            Architecture::ResNet {
                blocks, classes, activation, ..
            } => {
                assert_eq!((blocks, classes), (2, Some(2)));
                assert_eq!(activation, Activation::AUXILIARY);
            }
            other => panic!("{other:?}"),
        }
    }
}
