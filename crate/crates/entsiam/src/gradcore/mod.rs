//! A minimal differentiable layer set.
//!
//! There is no autodiff graph here, just the fixed menu of layers the
//! model needs — conv2d, batch norm, relu/sigmoid, 2x2 max pool, nearest
//! upsampling, linear, flatten — each with an explicit, hand-derived
//! backward pass, plus MSE loss and SGD/Adam-style optimizers. Everything
//! is f64 and single-threaded; convolutions and linear layers lower to a
//! blocked GEMM so training stays usable on a plain CPU. The [`fd`]
//! module provides central-difference gradient checking, which the test
//! suites run against every layer.

mod layers;
mod loss;
mod optim;
mod param;
mod tensor;

pub mod fd;

pub use layers::{
    flatten, maxpool2, maxpool2_backward, relu, relu_backward, sigmoid, sigmoid_backward,
    unflatten, upsample_nearest, upsample_nearest_backward, BatchNorm2d, BnCache, Conv2d, Linear,
    MaxPoolCache,
};
pub use loss::mse_loss;
pub use optim::{Optimizer, OptimKind};
pub use param::Param;
pub use tensor::Tensor4;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op}: expected {want}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        want: String,
        got: String,
    },
    #[error("batch norm needs a batch of at least 2 in training mode, got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
}
