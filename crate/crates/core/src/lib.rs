//! LoRA-adapted vision transformer with a single-center-loss objective,
//! built on a small tape-based autograd core, plus a synthetic
//! forgery-detection benchmark harness.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod kernels;
pub mod lora;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
