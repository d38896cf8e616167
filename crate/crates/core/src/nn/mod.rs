//! Minimal differentiable layer set with hand-written backward passes.

pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod tensor;

pub use model::{Model, ModelConfig};
pub use tensor::{GradSet, ParamSet, Tensor};
