//! Desk-scale gaze estimation lab: a reverse-mode tensor engine, gaze
//! models, receptive-field analysis, camera normalization, a synthetic
//! dataset and the training / ablation tooling around them.

pub mod cli;
pub mod config;
pub mod data;
pub mod experiment;
pub mod geometry;
pub mod nn;
pub mod raster;
pub mod rf;
pub mod scalar;
pub mod tensor;

pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, TensorError, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = nn::Model<f32>;
pub type Model64 = nn::Model<f64>;
