//! AMMSM: adaptive motion magnification with a sparse SSD backbone for
//! micro-expression recognition.
//!
//! The model code is generic over [`Scalar`]; training runs in `f32` and the
//! oracle and gradient tests in `f64`.

pub mod backbone;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod eval;
mod error;
pub mod magnifier;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod search;
pub mod sparse;
pub mod train;

pub use ammsm_tensor::{Scalar, Tape, Tensor, Var};
pub use error::{Error, Result};

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
