use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DistillMode, Pipeline, RunConfig, TargetSource};
use super::schedule::{schedule_eval, Schedule};
use crate::attacks::{fgsm, robustness_sweep, write_sweep_csv, AttackMode, AttackSpec, SweepRow};
use crate::data::{augment, AugmentConfig, Dataset};
use crate::defense::{defense_train_step, gradient_classifier_accuracy, DefenseState};
use crate::distill::{
    discriminator_accuracy, discriminator_architecture, distill_train_step, soft_target_baseline_step, DistillState,
};
use crate::error::{Error, Result};
use crate::multitask::{
    evaluate_tasks, multitask_train_step, normalize_task_losses, task_classifier_architecture,
    task_classifier_accuracy, GalBank, MultitaskState, Target, TaskDef, TaskSet,
};
use crate::net::{
    load_checkpoint, save_checkpoint, Activation, Architecture, Model, MultiHeadModel, Optimizer, OptimizerConfig,
    StepOutcome,
};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{apply, evaluate, supervised_grads, supervised_step, StepStats};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

const EVAL_BATCH: usize = 256;

/// Per-epoch metrics with a fixed column set.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Metrics {
    fn new(columns: Vec<String>) -> Self {
        Self { columns, rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Value of `column` in the last row.
    pub fn last(&self, column: &str) -> Option<f64> {
        let i = self.columns.iter().position(|c| c == column)?;
        self.rows.last().map(|r| r[i])
    }

    pub fn column(&self, column: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == column)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Shortest round-trip formatting; missing values (NaN) are empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| if v.is_nan() { String::new() } else { format!("{v}") }))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub metrics: Metrics,
    pub sweep: Vec<SweepRow>,
    /// Models saved in the checkpoint, by role.
    pub models: Vec<(String, Model<f64>)>,
}

/// Running weighted means over one epoch.
struct EpochMeans {
    sums: Vec<f64>,
    weight: f64,
}

impl EpochMeans {
    fn new(n: usize) -> Self {
        Self {
            sums: vec![0.0; n],
            weight: 0.0,
        }
    }

    fn add(&mut self, values: &[f64], weight: usize) {
        for (s, v) in self.sums.iter_mut().zip(values) {
            *s += v * weight as f64;
        }
        self.weight += weight as f64;
    }

    fn means(&self) -> Vec<f64> {
        self.sums.iter().map(|s| s / self.weight.max(1.0)).collect()
    }
}

fn cols(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn augment_batch(x: &Tensor<f64>, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let s = x.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Config(format!("augmentation needs image inputs, got shape {s:?}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(x.len());
    for img in x.data().chunks(c * h * w) {
        out.extend(augment(img, c, h, w, cfg, rng));
    }
    Tensor::new(s, out)
}

fn warn_skipped(what: &str, outcome: StepOutcome) {
    if let StepOutcome::Skipped(reason) = outcome {
        warn!("{what} update skipped: {reason}");
    }
}

/// Shape of one output of `model` for inputs shaped `input` (no batch axis).
fn output_shape(model: &Model<f64>, input: &[usize]) -> Result<Vec<usize>> {
    let mut shape = vec![1];
    shape.extend_from_slice(input);
    let tape = Tape::new();
    let p = model.bind_frozen(&tape);
    let out = model.forward(tape.constant(Tensor::zeros(shape)), &p)?;
    Ok(out.shape()[1..].to_vec())
}

/// Gradient classifier matching the main network: the auxiliary residual
/// topology for residual networks, an MLP with the same hidden sizes and
/// leaky ReLU otherwise.
pub fn default_aux_architecture(main: &Architecture, classes: usize) -> Architecture {
    match main {
        Architecture::ResNet {
            input,
            width,
            blocks,
            downsample,
            ..
        } => Architecture::ResNet {
            input: *input,
            width: *width,
            blocks: *blocks,
            classes: Some(classes),
            downsample: *downsample,
            activation: Activation::AUXILIARY,
        },
        Architecture::Mlp { dims, .. } => {
            let mut d = dims.clone();
            *d.last_mut().expect("mlp has dims") = classes;
            Architecture::Mlp {
                dims: d,
                activation: Activation::AUXILIARY,
            }
        }
        other => other.clone(),
    }
}

/// Runs `config` into `out_dir`, resolving relative paths against `base`.
pub fn run(config: &RunConfig, out_dir: &Path, base: &Path) -> Result<RunOutcome> {
    config.validate(base)?;
    let resolved = config.resolved(base);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let snapshot = serde_json::to_string_pretty(&resolved)?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, snapshot + "\n").map_err(|e| Error::io(&cfg_path, e))?;

    let (train, test) = resolved.dataset.load::<f64>(base)?;
    info!(
        "{}: {} train / {} test examples, {} epochs",
        resolved.pipeline.name(),
        train.len(),
        test.len(),
        resolved.epochs
    );
    let (metrics, models) = match resolved.pipeline {
        Pipeline::Baseline | Pipeline::AdversarialBaseline => run_supervised(&resolved, &train, &test)?,
        Pipeline::Defense => run_defense(&resolved, &train, &test)?,
        Pipeline::Distill => run_distill(&resolved, base, &train, &test)?,
        Pipeline::Multitask => run_multitask(&resolved, &train, &test)?,
    };
    metrics.write_csv(&out_dir.join(METRICS_FILE))?;

    let steps = (resolved.epochs * train.len().div_ceil(resolved.batch_size)) as u64;
    let refs: Vec<(&str, &Model<f64>)> = models.iter().map(|(r, m)| (r.as_str(), m)).collect();
    save_checkpoint(&out_dir.join(CHECKPOINT_FILE), &refs, resolved.seed, steps)?;

    let mut sweep = Vec::new();
    if let Some(a) = &resolved.attacks {
        let main = &models.iter().find(|(r, _)| r == "main").expect("classification pipelines save main").1;
        let settings: Vec<(usize, AttackMode)> = a.settings.iter().map(|s| (s.k, s.mode)).collect();
        sweep = robustness_sweep(
            &resolved.method_name(),
            main,
            &test.inputs,
            &test.labels,
            &a.epsilons,
            &settings,
            resolved.input_range,
            resolved.seed,
            a.batch,
        )?;
        write_sweep_csv(&out_dir.join(SWEEP_FILE), &sweep)?;
    }
    Ok(RunOutcome {
        dir: out_dir.to_path_buf(),
        metrics,
        sweep,
        models,
    })
}

struct Epochs<'a> {
    config: &'a RunConfig,
    schedule: Schedule,
    rng: ChaCha8Rng,
}

impl<'a> Epochs<'a> {
    fn new(config: &'a RunConfig, alpha_max: f64, beta_max: f64) -> Result<Self> {
        Ok(Self {
            config,
            schedule: Schedule::new(config.epochs, alpha_max, beta_max)?,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    /// Shuffled batches (augmented when configured) for one epoch.
    fn batches(&mut self, data: &Dataset<f64>) -> Result<Vec<(Vec<usize>, Tensor<f64>)>> {
        let mut out = Vec::new();
        for idx in data.batches(self.config.batch_size, &mut self.rng) {
            let x = data.inputs.select(&idx);
            let x = match &self.config.augment {
                Some(a) => augment_batch(&x, a, &mut self.rng)?,
                None => x,
            };
            out.push((idx, x));
        }
        Ok(out)
    }
}

fn train_supervised_model(
    model: &mut Model<f64>,
    opt: &mut Optimizer<f64>,
    train: &Dataset<f64>,
    epochs: &mut Epochs<'_>,
    adversarial: Option<AttackSpec>,
) -> Result<Vec<f64>> {
    let mut means = EpochMeans::new(2);
    for (idx, x) in epochs.batches(train)? {
        let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let stats = match adversarial {
            None => supervised_step(model, opt, &x, &y)?,
            Some(spec) => {
                let adv = fgsm(model, &x, &y, &spec)?;
                let (gc, sc) = supervised_grads(model, &x, &y)?;
                let (ga, sa) = supervised_grads(model, &adv, &y)?;
                let g: Vec<Tensor<f64>> = gc.iter().zip(&ga).map(|(a, b)| a.zip_map(b, |u, v| 0.5 * (u + v))).collect::<Result<_>>()?;
                warn_skipped("model", apply(model, opt, &g)?);
                StepStats {
                    loss: 0.5 * (sc.loss + sa.loss),
                    accuracy: sc.accuracy,
                }
            }
        };
        if !stats.loss.is_finite() {
            return Err(Error::Diverged(format!("training loss {}; run aborted", stats.loss)));
        }
        means.add(&[stats.loss, stats.accuracy], y.len());
    }
    Ok(means.means())
}

fn run_supervised(config: &RunConfig, train: &Dataset<f64>, test: &Dataset<f64>) -> Result<(Metrics, Vec<(String, Model<f64>)>)> {
    let mut model = Model::new(config.architecture.clone(), config.seed)?;
    let mut opt = Optimizer::new(config.optimizer, &model.tensors());
    let mut epochs = Epochs::new(config, 0.0, 0.0)?;
    let adversarial = (config.pipeline == Pipeline::AdversarialBaseline).then_some(AttackSpec {
        range: config.input_range,
        ..AttackSpec::new(config.adversarial.epsilon, 1, AttackMode::NonTargeted)
    });
    let mut metrics = Metrics::new(cols(&["epoch", "lr", "train_loss", "train_accuracy", "test_accuracy"]));
    for e in 0..config.epochs {
        let s = schedule_eval(&epochs.schedule, e as f64)?;
        opt.set_lr_multiplier(s.lr);
        let m = train_supervised_model(&mut model, &mut opt, train, &mut epochs, adversarial)?;
        let acc = evaluate(&model, &test.inputs, &test.labels, EVAL_BATCH)?;
        metrics.push(vec![e as f64, opt.lr(), m[0], m[1], acc]);
    }
    Ok((metrics, vec![("main".into(), model)]))
}

fn run_defense(config: &RunConfig, train: &Dataset<f64>, test: &Dataset<f64>) -> Result<(Metrics, Vec<(String, Model<f64>)>)> {
    let cfg = &config.greace;
    let main = Model::new(config.architecture.clone(), config.seed)?;
    let aux_arch = config
        .aux_architecture
        .clone()
        .unwrap_or_else(|| default_aux_architecture(&config.architecture, train.classes));
    let aux = Model::new(aux_arch, config.seed.wrapping_add(1))?;
    let mut state = DefenseState {
        main_opt: Optimizer::new(config.optimizer, &main.tensors()),
        aux_opt: Optimizer::new(config.aux_optimizer.unwrap_or(config.optimizer), &aux.tensors()),
        main,
        aux,
    };
    let mut epochs = Epochs::new(config, cfg.alpha_max, cfg.beta_max)?;
    let mut metrics = Metrics::new(cols(&[
        "epoch",
        "lr",
        "alpha",
        "beta",
        "main_loss",
        "main_accuracy",
        "aux_loss",
        "aux_accuracy",
        "grad_norm",
        "probe_norm",
        "test_accuracy",
        "aux_test_accuracy",
    ]));
    for e in 0..config.epochs {
        let s = schedule_eval(&epochs.schedule, e as f64)?;
        state.main_opt.set_lr_multiplier(s.lr);
        state.aux_opt.set_lr_multiplier(s.lr);
        let mut means = EpochMeans::new(6);
        for (idx, x) in epochs.batches(train)? {
            let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let r = defense_train_step(&mut state, &x, &y, cfg, s.alpha, s.beta)?;
            let probe = r.probe.iter().map(|p| p * p).sum::<f64>().sqrt();
            means.add(
                &[r.main_loss, r.main_accuracy, r.aux_loss, r.aux_accuracy, r.grad_norm, probe],
                y.len(),
            );
        }
        let m = means.means();
        let acc = evaluate(&state.main, &test.inputs, &test.labels, EVAL_BATCH)?;
        let aux_acc = gradient_classifier_accuracy(&state, &test.inputs, &test.labels, cfg, EVAL_BATCH)?;
        let mut row = vec![e as f64, state.main_opt.lr(), s.alpha, s.beta];
        row.extend(m);
        row.extend([acc, aux_acc]);
        metrics.push(row);
    }
    Ok((metrics, vec![("main".into(), state.main), ("aux".into(), state.aux)]))
}

fn load_or_train_teacher(config: &RunConfig, base: &Path) -> Result<Model<f64>> {
    let d = config.distill.as_ref().expect("validated");
    if let Some(p) = &d.teacher.checkpoint {
        let ckpt = load_checkpoint::<f64>(&base.join(p))?;
        return Ok(ckpt.model(&d.teacher.role)?.clone());
    }
    let arch = d.teacher.architecture.clone().expect("validated");
    let mut manifest = config.dataset.clone();
    manifest.fraction = 1.0;
    let (full, _) = manifest.load::<f64>(base)?;
    let mut teacher = Model::new(arch, config.seed.wrapping_add(4))?;
    let mut opt = Optimizer::new(config.optimizer, &teacher.tensors());
    let mut teacher_cfg = config.clone();
    teacher_cfg.epochs = d.teacher.epochs;
    teacher_cfg.seed = config.seed.wrapping_add(4);
    let mut epochs = Epochs::new(&teacher_cfg, 0.0, 0.0)?;
    for e in 0..d.teacher.epochs {
        opt.set_lr_multiplier(schedule_eval(&epochs.schedule, e as f64)?.lr);
        let m = train_supervised_model(&mut teacher, &mut opt, &full, &mut epochs, None)?;
        info!("teacher epoch {e}: loss {:.4}, accuracy {:.4}", m[0], m[1]);
    }
    Ok(teacher)
}

fn run_distill(
    config: &RunConfig,
    base: &Path,
    train: &Dataset<f64>,
    test: &Dataset<f64>,
) -> Result<(Metrics, Vec<(String, Model<f64>)>)> {
    let d = config.distill.as_ref().expect("validated");
    let teacher = load_or_train_teacher(config, base)?;
    let student = Model::new(config.architecture.clone(), config.seed)?;
    let disc_arch = d
        .discriminator
        .clone()
        .unwrap_or_else(|| discriminator_architecture(&config.architecture));
    let discriminator = Model::new(disc_arch, config.seed.wrapping_add(2))?;
    let mut state = DistillState {
        student_opt: Optimizer::new(config.optimizer, &student.tensors()),
        disc_opt: Optimizer::new(d.discriminator_optimizer.unwrap_or(config.optimizer), &discriminator.tensors()),
        student,
        teacher,
        discriminator,
    };
    let mut epochs = Epochs::new(config, 0.0, 0.0)?;
    let mut metrics = Metrics::new(cols(&[
        "epoch",
        "lr",
        "student_loss",
        "student_accuracy",
        "disc_loss",
        "disc_accuracy",
        "d_value",
        "test_accuracy",
        "disc_test_accuracy",
    ]));
    for e in 0..config.epochs {
        let s = schedule_eval(&epochs.schedule, e as f64)?;
        state.student_opt.set_lr_multiplier(s.lr);
        state.disc_opt.set_lr_multiplier(s.lr);
        let mut means = EpochMeans::new(5);
        for (idx, x) in epochs.batches(train)? {
            let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let row = match d.mode {
                DistillMode::Great => {
                    let r = distill_train_step(&mut state, &x, &y, &d.params)?;
                    [r.student_loss, r.student_accuracy, r.disc_loss, r.disc_accuracy, r.d_value]
                }
                DistillMode::SoftTarget => {
                    let r = soft_target_baseline_step(
                        &mut state.student,
                        &mut state.student_opt,
                        &state.teacher,
                        &x,
                        &y,
                        d.params.temperature,
                        d.params.mix,
                    )?;
                    [r.loss, r.accuracy, f64::NAN, f64::NAN, f64::NAN]
                }
                DistillMode::Supervised => {
                    let r = supervised_step(&mut state.student, &mut state.student_opt, &x, &y)?;
                    [r.loss, r.accuracy, f64::NAN, f64::NAN, f64::NAN]
                }
            };
            if !row[0].is_finite() {
                return Err(Error::Diverged(format!("student loss {}; run aborted", row[0])));
            }
            means.add(&row, y.len());
        }
        let acc = evaluate(&state.student, &test.inputs, &test.labels, EVAL_BATCH)?;
        let disc_acc = if d.mode == DistillMode::Great {
            discriminator_accuracy(&state, &test.inputs, &test.labels, &d.params)?
        } else {
            f64::NAN
        };
        let mut row = vec![e as f64, state.student_opt.lr()];
        row.extend(means.means());
        row.extend([acc, disc_acc]);
        metrics.push(row);
    }
    Ok((
        metrics,
        vec![
            ("main".into(), state.student),
            ("teacher".into(), state.teacher),
            ("discriminator".into(), state.discriminator),
        ],
    ))
}

fn task_targets(config: &RunConfig, data: &Dataset<f64>) -> Result<Vec<Target<f64>>> {
    let m = config.multitask.as_ref().expect("validated");
    m.tasks
        .iter()
        .map(|t| match t.target {
            TargetSource::Labels => Ok(Target::Classes(data.labels.clone())),
            TargetSource::Dense { index } => data.targets.get(index).cloned().map(Target::Dense).ok_or_else(|| {
                Error::Config(format!(
                    "task {:?} uses dense target {index} but the dataset has {}",
                    t.name,
                    data.targets.len()
                ))
            }),
        })
        .collect()
}

fn run_multitask(config: &RunConfig, train: &Dataset<f64>, test: &Dataset<f64>) -> Result<(Metrics, Vec<(String, Model<f64>)>)> {
    let m = config.multitask.as_ref().expect("validated");
    let n = m.tasks.len();
    let encoder = Model::new(config.architecture.clone(), config.seed)?;
    let feature = output_shape(&encoder, &train.input_shape())?;
    let decoders = m
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| Model::new(t.decoder.clone(), config.seed.wrapping_add(10 + i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let model = MultiHeadModel::new(encoder, decoders, &train.input_shape())?;
    let classifier = if n >= 2 && m.step.classifier {
        Some(Model::new(
            task_classifier_architecture(&feature, n, m.classifier_width),
            config.seed.wrapping_add(3),
        )?)
    } else {
        None
    };
    let gals = GalBank::new(n, &feature);
    let gal_cfg = OptimizerConfig {
        lr: config.optimizer.lr * m.gal_lr_factor,
        ..config.optimizer
    };
    let cls_cfg = m.classifier_optimizer.unwrap_or(config.optimizer);
    let mut state = MultitaskState {
        encoder_opt: Optimizer::new(config.optimizer, &model.encoder.tensors()),
        decoder_opts: model.decoders.iter().map(|d| Optimizer::new(config.optimizer, &d.tensors())).collect(),
        classifier_opt: classifier.as_ref().map(|c| Optimizer::new(cls_cfg, &c.tensors())),
        gal_opt: Optimizer::new(gal_cfg, gals.gammas()),
        tasks: TaskSet::new(m.tasks.iter().map(|t| TaskDef { name: t.name.clone(), loss: t.loss }).collect())?,
        classifier,
        gals,
        model,
    };
    let train_targets = task_targets(config, train)?;
    let test_targets = task_targets(config, test)?;

    let mut columns = vec!["epoch".to_string(), "lr".to_string()];
    for t in &m.tasks {
        columns.push(format!("loss_{}", t.name));
    }
    for t in &m.tasks {
        columns.push(format!("normalized_{}", t.name));
    }
    columns.extend(cols(&["normalized_total", "classifier_loss", "classifier_accuracy", "gamma_min"]));
    for t in &m.tasks {
        columns.push(format!("test_normalized_{}", t.name));
    }
    columns.extend(cols(&["test_normalized_total", "test_classifier_accuracy"]));
    let mut metrics = Metrics::new(columns);

    let mut epochs = Epochs::new(config, 0.0, 0.0)?;
    for e in 0..config.epochs {
        let s = schedule_eval(&epochs.schedule, e as f64)?;
        state.encoder_opt.set_lr_multiplier(s.lr);
        for o in &mut state.decoder_opts {
            o.set_lr_multiplier(s.lr);
        }
        if let Some(o) = state.classifier_opt.as_mut() {
            o.set_lr_multiplier(s.lr);
        }
        state.gal_opt.set_lr_multiplier(s.lr);
        let mut means = EpochMeans::new(2 * n + 3);
        let mut gamma_min = f64::INFINITY;
        for (idx, x) in epochs.batches(train)? {
            let targets: Vec<Target<f64>> = train_targets.iter().map(|t| t.select(&idx)).collect();
            let r = multitask_train_step(&mut state, &x, &targets, &m.step)?;
            let mut row = r.raw.clone();
            row.extend(&r.normalized);
            row.push(r.normalized.iter().sum());
            let (cl, ca) = r.classifier.unwrap_or((f64::NAN, f64::NAN));
            row.extend([cl, ca]);
            means.add(&row, idx.len());
            gamma_min = r.gamma.iter().map(|g| g.0).fold(gamma_min, f64::min);
        }
        let test_raw = evaluate_tasks(&state.model, &state.tasks, &test.inputs, &test_targets)?;
        let initial = state.tasks.initial.clone().expect("recorded on the first step");
        let test_norm = normalize_task_losses(&test_raw, &initial)?;
        let cls_acc = if state.classifier.is_some() {
            task_classifier_accuracy(&state, &test.inputs, &test_targets)?
        } else {
            f64::NAN
        };
        let mut row = vec![e as f64, state.encoder_opt.lr()];
        row.extend(means.means());
        row.push(gamma_min);
        row.extend(&test_norm);
        row.push(test_norm.iter().sum());
        row.push(cls_acc);
        metrics.push(row);
    }
    let mut models = vec![("encoder".to_string(), state.model.encoder)];
    for (t, d) in m.tasks.iter().zip(state.model.decoders) {
        models.push((format!("decoder_{}", t.name), d));
    }
    if let Some(c) = state.classifier {
        models.push(("task_classifier".into(), c));
    }
    Ok((metrics, models))
}

/// Sweeps the `main` model of a checkpoint over `epsilons` on the test
/// split of `config`'s dataset.
pub fn attack_checkpoint(
    checkpoint: &Path,
    config: &RunConfig,
    base: &Path,
    epsilons: &[f64],
    k: usize,
    mode: AttackMode,
) -> Result<Vec<SweepRow>> {
    config.dataset.validate(base)?;
    let ckpt = load_checkpoint::<f64>(checkpoint)?;
    let (_, test) = config.dataset.load::<f64>(base)?;
    let batch = config.attacks.as_ref().map_or(EVAL_BATCH, |a| a.batch);
    robustness_sweep(
        &config.method_name(),
        ckpt.model("main")?,
        &test.inputs,
        &test.labels,
        epsilons,
        &[(k, mode)],
        config.input_range,
        config.seed,
        batch,
    )
}
