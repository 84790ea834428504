//! Experiment harness: run configuration, the learning-rate and
//! adversarial-weight schedule, pipeline runners and sweep reports.

mod config;
mod report;
mod run;
mod schedule;
mod selftest;

pub use config::{
    AdversarialConfig, AttackSetting, DistillMode, DistillRunConfig, MultitaskRunConfig, Pipeline, RunConfig,
    SweepConfig, TargetSource, TaskSpec, TeacherConfig,
};
pub use report::{aggregate, find_sweeps, read_sweep, report, ReportRow, REPORT_FILE};
pub use run::{
    attack_checkpoint, default_aux_architecture, run, Metrics, RunOutcome, CHECKPOINT_FILE, CONFIG_FILE,
    METRICS_FILE, SWEEP_FILE,
};
pub use schedule::{schedule_eval, Schedule, ScheduleValues};
pub use selftest::{selftest, Check};
