//! Differentiable operations, implemented as methods on [`crate::Var`].

pub(crate) mod arith;
mod conv;
mod linalg;
mod nn;
mod reduce;
mod shape;
