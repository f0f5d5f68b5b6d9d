//! Differentiable tensor operations, layers and the Adam optimizer.
//!
//! Everything runs on the CPU in `f64`. Parameters are stored on the `f32`
//! grid so checkpoints written as 32-bit floats reload exactly.

pub mod error;
#[cfg(feature = "testing")]
pub mod gradcheck;
#[cfg(feature = "testing")]
pub mod gradsuite;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod param;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Grads, Graph, Var};
pub use layers::{Activation, Conv2d, ConvBlock, InstanceNorm, Linear, Module, ResidualBlock, UpsampleBlock};
pub use param::{Adam, ParamId, Parameter};
pub use tensor::Tensor;
