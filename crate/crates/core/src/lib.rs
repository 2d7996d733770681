// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod extrapolate;
pub mod increments;
pub mod linalg;
pub mod minimax;
pub mod saddle;
pub mod spectral;
pub mod validate;

pub use error::{Error, Result};
