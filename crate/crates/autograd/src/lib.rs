//! Reverse-mode automatic differentiation over dense tensors, generic over
//! the scalar type (`f32` for training, `f64` for gradient verification).

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Unary, Var};
pub use kernels::PadMode;
pub use params::{ParamBuilder, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
