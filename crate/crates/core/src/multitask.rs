//! Multi-task training with gradient-alignment layers (GALs): positive,
//! backward-only scalings of the shared feature, one per task, trained by
//! the reversed signal of a classifier that guesses which task produced a
//! feature gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::loss::{accuracy, cosine_loss, cross_entropy, mse};
use crate::net::{Activation, Architecture, Model, MultiHeadModel, Optimizer, Reduction};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{apply, values};

/// Smallest value any γ element may take.
pub const GAMMA_FLOOR: f64 = 1e-6;

/// Per-task positive scaling tensors over the shared feature shape.
#[derive(Clone, Debug, PartialEq)]
pub struct GalBank<T> {
    gammas: Vec<Tensor<T>>,
    floor: T,
}

impl<T: Scalar> GalBank<T> {
    /// `tasks` tensors of ones shaped like one feature sample.
    pub fn new(tasks: usize, feature: &[usize]) -> Self {
        Self {
            gammas: (0..tasks).map(|_| Tensor::ones(feature.to_vec())).collect(),
            floor: T::lit(GAMMA_FLOOR),
        }
    }

    pub fn gammas(&self) -> &[Tensor<T>] {
        &self.gammas
    }

    pub fn len(&self) -> usize {
        self.gammas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gammas.is_empty()
    }

    /// Replaces the γ tensors after checking shape and positivity.
    pub fn set(&mut self, gammas: Vec<Tensor<T>>) -> Result<()> {
        if gammas.len() != self.gammas.len() {
            return Err(Error::invalid(format!("expected {} GAL tensors", self.gammas.len())));
        }
        for (old, new) in self.gammas.iter().zip(&gammas) {
            if old.shape() != new.shape() {
                return Err(Error::shape("gal_set", format!("{:?} vs {:?}", old.shape(), new.shape())));
            }
        }
        let bank = Self {
            gammas,
            floor: self.floor,
        };
        bank.check_positive()?;
        *self = bank;
        Ok(())
    }

    pub fn check_positive(&self) -> Result<()> {
        for (i, g) in self.gammas.iter().enumerate() {
            if let Some(v) = g.data().iter().find(|v| !(**v > T::zero())) {
                return Err(Error::invalid(format!("GAL {i} has non-positive element {v}")));
            }
        }
        Ok(())
    }

    /// The GAL in front of decoder `task`: identity forward, upstream
    /// gradient multiplied by γ on the way back.
    pub fn layer<'t>(&self, f: Var<'t, T>, task: usize) -> Result<Var<'t, T>> {
        f.backward_scale(f.tape().constant(self.gammas[task].clone()))
    }

    /// (min, mean, max) over the elements of every γ.
    pub fn stats(&self) -> Vec<(f64, f64, f64)> {
        self.gammas
            .iter()
            .map(|g| {
                let v = g.to_f64_vec();
                let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (min, v.iter().sum::<f64>() / v.len() as f64, max)
            })
            .collect()
    }

    pub fn min(&self) -> f64 {
        self.stats().iter().map(|s| s.0).fold(f64::INFINITY, f64::min)
    }
}

/// Applies `grads` to the γ tensors with `opt` and clamps every element to
/// the floor.
pub fn gal_update<T: Scalar>(gals: &mut GalBank<T>, grads: &[Tensor<T>], opt: &mut Optimizer<T>) -> Result<()> {
    let mut gammas = gals.gammas.clone();
    opt.step(&mut gammas, grads)?;
    let floor = gals.floor;
    for g in &mut gammas {
        for v in g.data_mut() {
            if *v < floor {
                *v = floor;
            }
        }
    }
    gals.gammas = gammas;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    /// One minus the absolute cosine similarity.
    Cosine,
    /// Softmax cross-entropy on class labels.
    CrossEntropy,
}

/// Supervision for one task.
#[derive(Clone, Debug, PartialEq)]
pub enum Target<T> {
    Classes(Vec<usize>),
    Dense(Tensor<T>),
}

impl<T: Scalar> Target<T> {
    pub fn select(&self, idx: &[usize]) -> Self {
        match self {
            Target::Classes(y) => Target::Classes(idx.iter().map(|&i| y[i]).collect()),
            Target::Dense(t) => Target::Dense(t.select(idx)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDef {
    pub name: String,
    pub loss: LossKind,
}

/// Task definitions plus the losses recorded on the first step.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSet {
    pub tasks: Vec<TaskDef>,
    pub initial: Option<Vec<f64>>,
}

impl TaskSet {
    pub fn new(tasks: Vec<TaskDef>) -> Result<Self> {
        for (i, t) in tasks.iter().enumerate() {
            if tasks[..i].iter().any(|u| u.name == t.name) {
                return Err(Error::invalid(format!("duplicate task name {:?}", t.name)));
            }
        }
        Ok(Self { tasks, initial: None })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// `C_i / C_i⁰` for every task.
pub fn normalize_task_losses(losses: &[f64], initial: &[f64]) -> Result<Vec<f64>> {
    if losses.len() != initial.len() {
        return Err(Error::invalid("one initial loss per task required"));
    }
    losses
        .iter()
        .zip(initial)
        .map(|(c, c0)| {
            if *c0 <= 1e-12 {
                Err(Error::invalid(format!("initial task loss {c0} is degenerate")))
            } else {
                Ok(c / c0)
            }
        })
        .collect()
}

/// Task loss on the tape.
pub fn task_loss<'t, T: Scalar>(kind: LossKind, pred: Var<'t, T>, target: &Target<T>) -> Result<Var<'t, T>> {
    match (kind, target) {
        (LossKind::CrossEntropy, Target::Classes(y)) => cross_entropy(pred, y, Reduction::Mean),
        (LossKind::Mse, Target::Dense(t)) => mse(pred, pred.tape().constant(t.clone())),
        (LossKind::Cosine, Target::Dense(t)) => cosine_loss(pred, pred.tape().constant(t.clone())),
        (kind, _) => Err(Error::invalid(format!("{kind:?} loss given the wrong target kind"))),
    }
}

/// Decoder outputs and raw task losses on a detached feature leaf.
pub struct TaskForward<'t, T> {
    /// Feature leaf the decoders consume.
    pub feature: Var<'t, T>,
    pub losses: Vec<Var<'t, T>>,
}

/// Runs every decoder on `feature` and evaluates its loss.
pub fn task_forward<'t, T: Scalar>(
    model: &MultiHeadModel<T>,
    decoder_params: &[Vec<Var<'t, T>>],
    feature: Var<'t, T>,
    tasks: &TaskSet,
    targets: &[Target<T>],
) -> Result<TaskForward<'t, T>> {
    if targets.len() != tasks.len() || model.decoders.len() != tasks.len() {
        return Err(Error::invalid(format!(
            "{} tasks, {} decoders, {} targets",
            tasks.len(),
            model.decoders.len(),
            targets.len()
        )));
    }
    let mut losses = Vec::with_capacity(tasks.len());
    for ((dec, params), (def, target)) in model
        .decoders
        .iter()
        .zip(decoder_params)
        .zip(tasks.tasks.iter().zip(targets))
    {
        let pred = dec.forward(feature, params)?;
        losses.push(task_loss(def.loss, pred, target)?);
    }
    Ok(TaskForward { feature, losses })
}

/// `∇_f (C_i / C_i⁰)` for every task, built with `create_graph`.
pub fn task_feature_gradients<'t, T: Scalar>(
    fwd: &TaskForward<'t, T>,
    initial: &[f64],
) -> Result<Vec<Var<'t, T>>> {
    let tape = fwd.feature.tape();
    let mut out = Vec::with_capacity(fwd.losses.len());
    for (loss, c0) in fwd.losses.iter().zip(initial) {
        let normalized = loss.scale(T::lit(1.0 / c0));
        out.push(tape.backward(normalized, &[fwd.feature], true)?[0]);
    }
    Ok(out)
}

/// Encoder parameter gradients when the feature receives
/// `Σ_i g_i ⊙ γ_i` as its upstream gradient.
pub fn gal_scaled_encoder_update<'t, T: Scalar>(
    feature: Var<'t, T>,
    encoder_params: &[Var<'t, T>],
    task_grads: &[Tensor<T>],
    gals: &GalBank<T>,
) -> Result<Vec<Tensor<T>>> {
    gals.check_positive()?;
    if task_grads.len() != gals.len() {
        return Err(Error::invalid("one GAL per task gradient required"));
    }
    let tape = feature.tape();
    let mut seed: Option<Tensor<T>> = None;
    for (g, gamma) in task_grads.iter().zip(gals.gammas()) {
        let scaled = crate::kernels::broadcast_to(gamma, g.shape()).zip_map(g, |a, b| a * b)?;
        seed = Some(match seed {
            Some(s) => s.zip_map(&scaled, |a, b| a + b)?,
            None => scaled,
        });
    }
    let seed = seed.ok_or_else(|| Error::invalid("no tasks"))?;
    Ok(values(&tape.vjp(feature, tape.constant(seed), encoder_params, false)?))
}

/// Classifier input for each task gradient: `B · g_i ⊙ γ_i`, passed
/// through a unit gradient reversal, with task-id labels. The batch factor
/// puts each row back on the per-sample scale.
fn classifier_batch<'t, T: Scalar>(
    tape: &'t Tape<T>,
    task_grads: &[Tensor<T>],
    gammas: &[Var<'t, T>],
) -> Result<(Var<'t, T>, Vec<usize>)> {
    let mut parts = Vec::with_capacity(task_grads.len());
    let mut labels = Vec::new();
    for (i, (g, gamma)) in task_grads.iter().zip(gammas).enumerate() {
        let b = g.batch();
        let scaled = tape.constant(g.map(|v| v * T::from_usize(b).expect("batch")));
        parts.push(scaled.mul(*gamma)?.gradient_reversal(T::one()));
        labels.extend(std::iter::repeat_n(i, b));
    }
    Ok((Var::concat(&parts, 0)?, labels))
}

/// N-way classifier over feature gradients: leaky-ReLU MLP for flat
/// features, residual CNN for image features.
pub fn task_classifier_architecture(feature: &[usize], tasks: usize, width: usize) -> Architecture {
    match *feature {
        [c, h, w] => crate::net::build_aux_classifier([c, h, w], tasks, width, 2),
        _ => Architecture::Mlp {
            dims: vec![feature.iter().product(), width, tasks],
            activation: Activation::AUXILIARY,
        },
    }
}

/// One classifier step on fixed γ: returns (loss, accuracy).
pub fn aux_task_classifier_step<T: Scalar>(
    classifier: &mut Model<T>,
    opt: &mut Optimizer<T>,
    task_grads: &[Tensor<T>],
    gals: &GalBank<T>,
) -> Result<(f64, f64)> {
    if task_grads.len() < 2 {
        return Err(Error::invalid("task classification needs at least two tasks"));
    }
    let tape = Tape::new();
    let params = classifier.bind(&tape);
    let gammas: Vec<_> = gals.gammas().iter().map(|g| tape.constant(g.clone())).collect();
    let (input, labels) = classifier_batch(&tape, task_grads, &gammas)?;
    let logits = classifier.forward(input, &params)?;
    let loss = cross_entropy(logits, &labels, Reduction::Mean)?;
    tape.check_finite()?;
    let g = values(&tape.backward(loss, &params, false)?);
    apply(classifier, opt, &g)?;
    Ok((loss.item().to_f64().unwrap_or(f64::NAN), accuracy(&logits.value(), &labels)))
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultitaskConfig {
    /// Train γ from the reversed classifier signal. Off gives the
    /// equal-weights baseline.
    #[serde(default = "default_true")]
    pub train_gals: bool,
    /// Train the task classifier. With `train_gals` off it only monitors.
    #[serde(default = "default_true")]
    pub classifier: bool,
}

impl Default for MultitaskConfig {
    fn default() -> Self {
        Self {
            train_gals: true,
            classifier: true,
        }
    }
}

/// Everything one multi-task step reads and updates.
#[derive(Clone, Debug)]
pub struct MultitaskState<T> {
    pub model: MultiHeadModel<T>,
    pub tasks: TaskSet,
    pub gals: GalBank<T>,
    pub classifier: Option<Model<T>>,
    pub encoder_opt: Optimizer<T>,
    pub decoder_opts: Vec<Optimizer<T>>,
    pub classifier_opt: Option<Optimizer<T>>,
    pub gal_opt: Optimizer<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultitaskStepReport {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    /// Classifier loss and accuracy when the classifier ran.
    pub classifier: Option<(f64, f64)>,
    pub gamma: Vec<(f64, f64, f64)>,
}

/// One step, in order: task losses and their normalization (recording
/// `C⁰` on the first call), feature gradients, decoder updates from the
/// normalized losses, encoder update from `Σ g_i ⊙ γ_i`, classifier
/// update, and GAL update from the reversed classifier gradient.
pub fn multitask_train_step<T: Scalar>(
    state: &mut MultitaskState<T>,
    x: &Tensor<T>,
    targets: &[Target<T>],
    cfg: &MultitaskConfig,
) -> Result<MultitaskStepReport> {
    let n = state.tasks.len();
    let tape = Tape::new();
    let enc = state.model.encoder.bind(&tape);
    let decs: Vec<_> = state.model.decoders.iter().map(|d| d.bind(&tape)).collect();
    let f = state.model.encoder.forward(tape.constant(x.clone()), &enc)?;
    let fwd = task_forward(&state.model, &decs, f.detach_leaf(), &state.tasks, targets)?;
    let raw: Vec<f64> = fwd.losses.iter().map(|l| l.item().to_f64().unwrap_or(f64::NAN)).collect();
    if let Some(bad) = raw.iter().find(|v| !v.is_finite()) {
        return Err(Error::Diverged(format!("task loss {bad}; step aborted")));
    }
    let initial = state.tasks.initial.get_or_insert_with(|| raw.clone()).clone();
    let normalized = normalize_task_losses(&raw, &initial)?;

    let feature_grads = task_feature_gradients(&fwd, &initial)?;
    let g: Vec<Tensor<T>> = values(&feature_grads);

    let mut total = fwd.losses[0].scale(T::lit(1.0 / initial[0]));
    for (l, c0) in fwd.losses.iter().zip(&initial).skip(1) {
        total = total.add(l.scale(T::lit(1.0 / c0)))?;
    }
    let flat: Vec<Var<'_, T>> = decs.iter().flatten().copied().collect();
    let mut dec_grads = values(&tape.backward(total, &flat, false)?);
    let encoder_grads = gal_scaled_encoder_update(f, &enc, &g, &state.gals)?;
    tape.check_finite()?;

    let mut classifier = None;
    let mut gal_grads = None;
    if cfg.classifier && n >= 2 {
        if let (Some(cls), Some(_)) = (&state.classifier, &state.classifier_opt) {
            let ctape = Tape::new();
            let params = cls.bind(&ctape);
            let gammas: Vec<_> = state.gals.gammas().iter().map(|gm| ctape.leaf(gm.clone())).collect();
            let (input, labels) = classifier_batch(&ctape, &g, &gammas)?;
            let logits = cls.forward(input, &params)?;
            let loss = cross_entropy(logits, &labels, Reduction::Mean)?;
            ctape.check_finite()?;
            let mut wrt = params.clone();
            wrt.extend_from_slice(&gammas);
            let mut grads = values(&ctape.backward(loss, &wrt, false)?);
            gal_grads = Some(grads.split_off(params.len()));
            classifier = Some((
                loss.item().to_f64().unwrap_or(f64::NAN),
                accuracy(&logits.value(), &labels),
                grads,
            ));
        }
    }

    for (i, (dec, opt)) in state.model.decoders.iter_mut().zip(&mut state.decoder_opts).enumerate() {
        let count = dec.params().len();
        let rest = dec_grads.split_off(count);
        apply(dec, opt, &dec_grads).map_err(|e| Error::invalid(format!("decoder {i}: {e}")))?;
        dec_grads = rest;
    }
    apply(&mut state.model.encoder, &mut state.encoder_opt, &encoder_grads)?;
    let mut cls_report = None;
    if let Some((loss, acc, grads)) = classifier {
        let cls = state.classifier.as_mut().expect("classifier present");
        let opt = state.classifier_opt.as_mut().expect("optimizer present");
        apply(cls, opt, &grads)?;
        cls_report = Some((loss, acc));
        if cfg.train_gals {
            gal_update(&mut state.gals, &gal_grads.expect("with classifier"), &mut state.gal_opt)?;
        }
    }
    Ok(MultitaskStepReport {
        raw,
        normalized,
        classifier: cls_report,
        gamma: state.gals.stats(),
    })
}

/// Raw task losses of the model on a dataset, evaluated in one pass.
pub fn evaluate_tasks<T: Scalar>(model: &MultiHeadModel<T>, tasks: &TaskSet, x: &Tensor<T>, targets: &[Target<T>]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let enc = model.encoder.bind_frozen(&tape);
    let decs: Vec<_> = model.decoders.iter().map(|d| d.bind_frozen(&tape)).collect();
    let f = model.encoder.forward(tape.constant(x.clone()), &enc)?;
    let fwd = task_forward(model, &decs, f, tasks, targets)?;
    tape.check_finite()?;
    Ok(fwd.losses.iter().map(|l| l.item().to_f64().unwrap_or(f64::NAN)).collect())
}

/// Task-classifier accuracy on the feature gradients of a held-out batch.
pub fn task_classifier_accuracy<T: Scalar>(state: &MultitaskState<T>, x: &Tensor<T>, targets: &[Target<T>]) -> Result<f64> {
    let Some(cls) = &state.classifier else {
        return Err(Error::invalid("no task classifier"));
    };
    let initial = state
        .tasks
        .initial
        .clone()
        .ok_or_else(|| Error::invalid("initial losses not recorded yet"))?;
    let tape = Tape::new();
    let enc = state.model.encoder.bind_frozen(&tape);
    let decs: Vec<_> = state.model.decoders.iter().map(|d| d.bind_frozen(&tape)).collect();
    let f = state.model.encoder.forward(tape.constant(x.clone()), &enc)?;
    let fwd = task_forward(&state.model, &decs, f.detach_leaf(), &state.tasks, targets)?;
    let g = values(&task_feature_gradients(&fwd, &initial)?);
    let gammas: Vec<_> = state.gals.gammas().iter().map(|gm| tape.constant(gm.clone())).collect();
    let (input, labels) = classifier_batch(&tape, &g, &gammas)?;
    let params = cls.bind_frozen(&tape);
    let logits = cls.forward(input, &params)?;
    Ok(accuracy(&logits.value(), &labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{OptimizerConfig, OptimizerKind};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_task_losses(&[2.0, 3.0], &[2.0, 3.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(normalize_task_losses(&[1.0], &[2.0]).unwrap(), vec![0.5]);
        assert!(normalize_task_losses(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn gal_clamps_and_rejects() {
        let mut bank = GalBank::<f64>::new(1, &[2]);
        let mut opt = Optimizer::new(
            OptimizerConfig {
                kind: OptimizerKind::sgd(),
                lr: 1.0,
            },
            bank.gammas(),
        );
        gal_update(&mut bank, &[t(&[2], &[1.1, 0.0])], &mut opt).unwrap();
        assert_eq!(bank.gammas()[0].data(), &[GAMMA_FLOOR, 1.0]);
        assert!(bank.set(vec![t(&[2], &[1.0, -0.5])]).is_err());
        assert!(bank.set(vec![t(&[2], &[1.0, 0.5])]).is_ok());
    }

    #[test]
    fn gal_layer_is_transparent_forward_and_scales_backward() {
        let mut bank = GalBank::<f64>::new(1, &[3]);
        bank.set(vec![t(&[3], &[0.5, 2.0, 0.25])]).unwrap();
        let tape = Tape::new();
        let f = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.0]));
        let out = bank.layer(f, 0).unwrap();
        assert_eq!(*out.value(), *f.value());
        let loss = out.mul(out).unwrap().sum();
        let g = tape.backward(loss, &[f], false).unwrap()[0].value();
        let expected = [1.0, -8.0, 1.5, 0.5, 0.0, -0.5];
        assert_eq!(g.data(), &expected);
    }
}
