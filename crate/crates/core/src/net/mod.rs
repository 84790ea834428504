//! Layers, losses, optimizers and checkpoints.

pub mod checkpoint;
pub mod loss;
mod model;
pub mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{cosine_loss, cross_entropy, mse, softmax_cross_entropy, Reduction};
pub use model::{build_aux_classifier, build_resnet_small, Activation, Architecture, Model, MultiHeadModel, Param};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, StepOutcome};

#[cfg(test)]
mod tests;
