#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail the range checks
pub mod channel;
pub mod coherent;
pub mod covariance;
pub mod error;
pub mod estimators;
pub mod numerics;
pub mod special;
pub mod sweep;

pub use error::{Error, Result};
