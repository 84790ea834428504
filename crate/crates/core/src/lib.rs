//! Gradient adversarial training on a double-backprop autodiff tape.
//!
//! Everything numerical is generic over [`Scalar`]; the aliases at the
//! crate root fix the scalar to `f64`.

pub mod attacks;
pub mod data;
pub mod defense;
pub mod distill;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod multitask;
pub mod net;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tape::Tape<f64>;
pub type Var<'t> = tape::Var<'t, f64>;
pub type Model = net::Model<f64>;
pub type MultiHeadModel = net::MultiHeadModel<f64>;
pub type Optimizer = net::Optimizer<f64>;
pub type Dataset = data::Dataset<f64>;
pub type DefenseState = defense::DefenseState<f64>;
pub type DistillState = distill::DistillState<f64>;
pub type MultitaskState = multitask::MultitaskState<f64>;
