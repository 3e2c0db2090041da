//! Counterfactual prompt learning for frozen vision-language encoders.

pub mod autodiff;
pub mod counterfactual;
pub mod encoder;
pub mod error;
pub mod objective;
pub mod prompt;
pub mod sampler;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Encoder32 = encoder::FrozenEncoder<f32>;
pub type Encoder64 = encoder::FrozenEncoder<f64>;
pub type Params32 = prompt::PromptParams<f32>;
pub type Params64 = prompt::PromptParams<f64>;
pub type Features32 = encoder::FeatureSet<f32>;
pub type Checkpoint32 = objective::Checkpoint<f32>;
