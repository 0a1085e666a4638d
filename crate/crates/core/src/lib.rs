//! Early-fusion multimodal transformer for video-grounded dialogue.
//!
//! Video region features and dialogue tokens are embedded into one sequence
//! and processed by a causal decoder stack, trained jointly on response
//! generation, masked token modeling, masked region modeling and video/text
//! matching. Everything numeric is generic over [`Scalar`]; the crate root
//! exposes `f32` aliases for training and `f64` aliases for verification.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod generation;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use autodiff::{Tape, Var, IGNORE};
pub use error::{Result, TensorError};
pub use model::{Model, ModelConfig};
pub use params::{ParamId, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
