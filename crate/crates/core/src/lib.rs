// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod data;
pub mod error;
pub mod ffw;
pub mod gating;
pub mod nn;
pub mod probe;
pub mod report;
pub mod theory;

pub use error::{Error, Result};
