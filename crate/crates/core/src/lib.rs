//! Wasserstein discriminant analysis.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod balancing;
pub mod covariance;
pub mod data;
pub mod error;
pub mod eval;
mod krylov;
mod linalg;
pub mod traceratio;
pub mod wda;

pub use error::{Result, WdaError};
