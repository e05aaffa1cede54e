//! UNetFormer semantic segmentation on a small deterministic CPU tensor
//! library.
//!
//! The crate is generic over the element type through [`Scalar`]; `f32` is
//! used for training and inference, `f64` for gradient checks. Aliases for
//! both live at the crate root.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use scalar::Scalar;
pub use tensor::{Graph, ParamStore, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
