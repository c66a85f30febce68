//! Landmark-weighted 3D Inception-ResNet + LSTM classifier for short video
//! clips, together with the small autodiff engine, data pipeline, trainer
//! and evaluation protocols it needs.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod landmark;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod training;

pub use config::{ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::{ModelParams, Network};
pub use tensor::{Element, Tape, Tensor, Var};
