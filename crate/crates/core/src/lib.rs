//! Gaussian Volterra processes with compound Poisson jumps: kernels,
//! discrete Volterra operators, simulation and exact prediction laws.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Test references keep every digit of their source.
#![cfg_attr(test, allow(clippy::excessive_precision))]

pub mod error;
pub mod grid;
pub mod kernels;
pub mod model;
pub mod operators;
pub mod prediction;
pub mod quadrature;
pub mod simulation;
pub mod verification;
pub mod wiener_hopf;

pub use error::{Error, Result};
pub use grid::{SamplePath, TimeGrid};
