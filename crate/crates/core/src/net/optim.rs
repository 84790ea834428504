use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn default_lr() -> f64 {
    1e-3
}

/// Update rule and its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam {
        #[serde(default = "Adam::beta1")]
        beta1: f64,
        #[serde(default = "Adam::beta2")]
        beta2: f64,
        #[serde(default = "Adam::eps")]
        eps: f64,
    },
    Sgd {
        #[serde(default = "Sgd::momentum")]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

struct Adam;
impl Adam {
    fn beta1() -> f64 {
        0.9
    }
    fn beta2() -> f64 {
        0.999
    }
    fn eps() -> f64 {
        1e-8
    }
}

struct Sgd;
impl Sgd {
    fn momentum() -> f64 {
        0.9
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: Adam::beta1(),
            beta2: Adam::beta2(),
            eps: Adam::eps(),
        }
    }

    /// Plain gradient descent.
    pub fn sgd() -> Self {
        OptimizerKind::Sgd {
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    /// Momentum 0.9 with weight decay 5e-4.
    pub fn sgd_momentum() -> Self {
        OptimizerKind::Sgd {
            momentum: Sgd::momentum(),
            weight_decay: 5e-4,
        }
    }
}

// Unknown keys are rejected by the flattened kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::adam(),
            lr: default_lr(),
        }
    }
}

/// Result of one [`Optimizer::step`].
#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Applied,
    /// The gradient contained non-finite values; nothing was changed.
    Skipped(String),
}

/// First-order optimizer with per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    multiplier: f64,
    steps: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        let second = match config.kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            config,
            multiplier: 1.0,
            steps: 0,
            first: zeros(),
            second,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Scales the base learning rate (schedules set this once per epoch).
    pub fn set_lr_multiplier(&mut self, m: f64) {
        self.multiplier = m;
    }

    pub fn lr(&self) -> f64 {
        self.config.lr * self.multiplier
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<StepOutcome> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let msg = format!("non-finite gradient for parameter {i}; step skipped");
            log::warn!("{msg}");
            return Ok(StepOutcome::Skipped(msg));
        }
        self.steps += 1;
        let lr = T::lit(self.lr());
        match self.config.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = T::lit(1.0 - beta1.powi(t));
                let c2 = T::lit(1.0 - beta2.powi(t));
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                let one = T::one();
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut().zip(self.second.iter_mut()))
                {
                    let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for (j, &gj) in g.data().iter().enumerate() {
                        m[j] = b1 * m[j] + (one - b1) * gj;
                        v[j] = b2 * v[j] + (one - b2) * gj * gj;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        p[j] = p[j] - lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd {
                momentum,
                weight_decay,
            } => {
                let (mu, wd) = (T::lit(momentum), T::lit(weight_decay));
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(self.first.iter_mut()) {
                    let (p, vel) = (p.data_mut(), vel.data_mut());
                    for (j, &gj) in g.data().iter().enumerate() {
                        let d = gj + wd * p[j];
                        vel[j] = mu * vel[j] + d;
                        p[j] = p[j] - lr * vel[j];
                    }
                }
            }
        }
        Ok(StepOutcome::Applied)
    }
}
