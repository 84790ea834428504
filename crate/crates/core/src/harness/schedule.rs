use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Polynomial decay of the learning rate, with the adversarial weights
/// ramping up as the learning rate falls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub e_max: usize,
    #[serde(default = "Schedule::default_power")]
    pub power: f64,
    #[serde(default)]
    pub alpha_max: f64,
    #[serde(default)]
    pub beta_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleValues {
    /// Learning-rate multiplier `m`.
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Schedule {
    fn default_power() -> f64 {
        0.9
    }

    pub fn new(e_max: usize, alpha_max: f64, beta_max: f64) -> Result<Self> {
        if e_max == 0 {
            return Err(Error::Config("schedule needs e_max >= 1".into()));
        }
        Ok(Self {
            e_max,
            power: Self::default_power(),
            alpha_max,
            beta_max,
        })
    }
}

/// `m = (1 − e/e_max)^0.9`, `α = α_max(1 − m)`, `β = β_max(1 − m)`.
pub fn schedule_eval(sched: &Schedule, e: f64) -> Result<ScheduleValues> {
    if sched.e_max == 0 {
        return Err(Error::Config("schedule needs e_max >= 1".into()));
    }
    let e_max = sched.e_max as f64;
    if !(0.0..=e_max).contains(&e) {
        return Err(Error::invalid(format!("epoch {e} outside [0, {e_max}]")));
    }
    let m = (1.0 - e / e_max).powf(sched.power);
    Ok(ScheduleValues {
        lr: m,
        alpha: sched.alpha_max * (1.0 - m),
        beta: sched.beta_max * (1.0 - m),
    })
}
