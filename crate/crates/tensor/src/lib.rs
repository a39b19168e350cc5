//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Everything is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below name the two concrete instantiations.

mod error;
mod gradcheck;
pub mod io;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, DEFAULT_EPS};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Var32 = Var<f32>;
pub type Var64 = Var<f64>;
