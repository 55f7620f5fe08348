//! Hybrid neural ODE for graph time-series forecasting with local
//! truncation error masks.

// `!(x > 0.0)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod dynamics;
pub mod error;
pub mod graph;
pub mod model;
pub mod stats;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
