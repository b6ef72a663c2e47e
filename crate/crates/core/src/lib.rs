//! Video pulse-wave estimation with a hybrid conventional/spiking transformer:
//! tensors and reverse-mode autodiff, LIF neurons, the model, training,
//! signal processing, energy accounting and firing-rate attention maps.

pub mod attention_maps;
pub mod autodiff;
pub mod energy;
pub mod error;
pub mod kernels;
pub mod runtime;
pub mod scalar;
pub mod signal;
pub mod spiking;
pub mod tensor;
pub mod training;
pub mod video;
pub mod model;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
