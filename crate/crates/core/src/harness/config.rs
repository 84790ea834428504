use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackMode;
use crate::data::{AugmentConfig, DatasetManifest};
use crate::defense::GreaceConfig;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::multitask::{LossKind, MultitaskConfig};
use crate::net::{Architecture, OptimizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Baseline,
    AdversarialBaseline,
    Defense,
    Distill,
    Multitask,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Baseline => "baseline",
            Pipeline::AdversarialBaseline => "adversarial_baseline",
            Pipeline::Defense => "defense",
            Pipeline::Distill => "distill",
            Pipeline::Multitask => "multitask",
        }
    }
}

fn default_adv_epsilon() -> f64 {
    0.2
}

/// FGSM settings for the adversarial-training baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialConfig {
    #[serde(default = "default_adv_epsilon")]
    pub epsilon: f64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            epsilon: default_adv_epsilon(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSetting {
    pub k: usize,
    pub mode: AttackMode,
}

fn default_input_range() -> [f64; 2] {
    [0.0, 1.0]
}

fn default_eval_batch() -> usize {
    256
}

/// Robustness sweep run on the test split after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    pub settings: Vec<AttackSetting>,
    #[serde(default = "default_eval_batch")]
    pub batch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// Gradient-adversarial student.
    Great,
    /// Classical soft-target distillation.
    SoftTarget,
    /// Student trained on labels only.
    Supervised,
}

/// Teacher for distillation: loaded from a checkpoint or trained in-run on
/// the full training split before the student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_teacher_role")]
    pub role: String,
    #[serde(default)]
    pub architecture: Option<Architecture>,
    #[serde(default)]
    pub epochs: usize,
}

fn default_teacher_role() -> String {
    "main".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillRunConfig {
    pub mode: DistillMode,
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub discriminator: Option<Architecture>,
    #[serde(default)]
    pub discriminator_optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub params: DistillConfig,
}

/// Where a task's targets come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSource {
    Labels,
    /// `targets[index]` of the dataset.
    Dense { index: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub loss: LossKind,
    pub target: TargetSource,
    pub decoder: Architecture,
}

fn default_classifier_width() -> usize {
    32
}

fn default_gal_lr_factor() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultitaskRunConfig {
    pub tasks: Vec<TaskSpec>,
    #[serde(default = "default_classifier_width")]
    pub classifier_width: usize,
    #[serde(default)]
    pub classifier_optimizer: Option<OptimizerConfig>,
    /// GAL learning rate relative to the main optimizer's.
    #[serde(default = "default_gal_lr_factor")]
    pub gal_lr_factor: f64,
    #[serde(default)]
    pub step: MultitaskConfig,
}

/// One experiment. Relative paths resolve against the directory of the
/// config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: Pipeline,
    /// Label for the sweep rows; defaults to the pipeline name.
    #[serde(default)]
    pub method: Option<String>,
    pub dataset: DatasetManifest,
    pub architecture: Architecture,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    /// Valid input range; attacks clamp into it.
    #[serde(default = "default_input_range")]
    pub input_range: [f64; 2],
    #[serde(default)]
    pub greace: GreaceConfig,
    #[serde(default)]
    pub aux_architecture: Option<Architecture>,
    #[serde(default)]
    pub aux_optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub adversarial: AdversarialConfig,
    #[serde(default)]
    pub distill: Option<DistillRunConfig>,
    #[serde(default)]
    pub multitask: Option<MultitaskRunConfig>,
    #[serde(default)]
    pub attacks: Option<SweepConfig>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn method_name(&self) -> String {
        self.method.clone().unwrap_or_else(|| self.pipeline.name().to_string())
    }

    /// Checks everything that can be checked before training, including
    /// that referenced files exist under `base`.
    pub fn validate(&self, base: &Path) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.dataset.validate(base)?;
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.input_range[0] < self.input_range[1]) {
            return fail(format!("input_range must satisfy lo < hi, got {:?}", self.input_range));
        }
        if !(self.optimizer.lr > 0.0) {
            return fail(format!("learning rate must be positive, got {}", self.optimizer.lr));
        }
        let needs = |what: &str, present: bool| -> Result<()> {
            if present {
                Ok(())
            } else {
                Err(Error::Config(format!("pipeline {} needs a {what} section", self.pipeline.name())))
            }
        };
        match self.pipeline {
            Pipeline::Defense => self.greace.validate()?,
            Pipeline::AdversarialBaseline => {
                if !(self.adversarial.epsilon >= 0.0) {
                    return fail(format!("adversarial epsilon must be >= 0, got {}", self.adversarial.epsilon));
                }
            }
            Pipeline::Distill => {
                needs("distill", self.distill.is_some())?;
                let d = self.distill.as_ref().expect("checked");
                d.params.validate()?;
                match (&d.teacher.checkpoint, &d.teacher.architecture) {
                    (Some(p), None) => {
                        if !base.join(p).is_file() {
                            return fail(format!("teacher checkpoint {} does not exist", base.join(p).display()));
                        }
                    }
                    (None, Some(_)) => {
                        if d.teacher.epochs == 0 {
                            return fail("an in-run teacher needs epochs >= 1".into());
                        }
                    }
                    _ => return fail("teacher needs exactly one of checkpoint and architecture".into()),
                }
            }
            Pipeline::Multitask => {
                needs("multitask", self.multitask.is_some())?;
                let m = self.multitask.as_ref().expect("checked");
                if m.tasks.is_empty() {
                    return fail("multitask needs at least one task".into());
                }
                if !(m.gal_lr_factor > 0.0) {
                    return fail(format!("gal_lr_factor must be positive, got {}", m.gal_lr_factor));
                }
                if self.attacks.is_some() {
                    return fail("robustness sweeps are not defined for the multitask pipeline".into());
                }
            }
            Pipeline::Baseline => {}
        }
        if let Some(a) = &self.attacks {
            if a.epsilons.iter().any(|e| !(*e >= 0.0)) {
                return fail("sweep epsilons must be >= 0".into());
            }
            if a.settings.iter().any(|s| s.k == 0) {
                return fail("sweep k must be at least 1".into());
            }
        }
        Ok(())
    }

    /// Copy with every relative path made absolute against `base`, so the
    /// snapshot can be re-run from anywhere.
    pub fn resolved(&self, base: &Path) -> Self {
        let abs = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        let mut out = self.clone();
        if let Some(p) = &self.dataset.path {
            out.dataset.path = Some(abs(p));
        }
        if let Some(d) = out.distill.as_mut() {
            if let Some(p) = &d.teacher.checkpoint {
                d.teacher.checkpoint = Some(abs(p));
            }
        }
        out.output_dir = None;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "pipeline": "baseline",
        "dataset": {"synthetic": {"kind": "blobs", "classes": 2, "dim": 4, "separation": 4.0},
                    "seed": 1, "split": {"train": 64, "test": 32}},
        "architecture": {"kind": "mlp", "dims": [4, 8, 2], "activation": {"kind": "relu"}},
        "epochs": 2, "batch_size": 16, "seed": 3
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.pipeline, Pipeline::Baseline);
        assert_eq!(c.adversarial.epsilon, 0.2);
        assert_eq!(c.greace.alpha_max, 1.0);
        assert_eq!(c.greace.beta_max, 2.0);
        c.validate(Path::new(".")).unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("\"epochs\"", "\"epocs\": 1, \"epochs\"");
        let e = RunConfig::from_json(&bad).unwrap_err();
        assert!(e.to_string().contains("epocs"), "{e}");
        let bad = MINIMAL.replace("\"seed\": 3", "\"seed\": 3, \"optimizer\": {\"kind\": \"adam\", \"lr\": 0.1, \"betta1\": 0.5}");
        assert!(RunConfig::from_json(&bad).is_err());
        let ok = MINIMAL.replace("\"seed\": 3", "\"seed\": 3, \"optimizer\": {\"kind\": \"sgd\", \"lr\": 0.1}");
        assert_eq!(RunConfig::from_json(&ok).unwrap().optimizer.lr, 0.1);
    }

    #[test]
    fn missing_sections_and_files_fail_validation() {
        let mut c = RunConfig::from_json(MINIMAL).unwrap();
        c.pipeline = Pipeline::Distill;
        assert!(matches!(c.validate(Path::new(".")), Err(Error::Config(_))));
        c.pipeline = Pipeline::Baseline;
        c.dataset.synthetic = None;
        c.dataset.path = Some("no/such/dir".into());
        let e = c.validate(Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("does not exist"), "{e}");
    }
}
