// `!(x > 0.0)` is used on purpose so that NaN fails validation. Samplers take
// the model, source, start, horizon, count, rng and execution mode explicitly.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod cde;
pub mod dynamics;
pub mod error;
pub mod par;
pub mod polyset;
pub mod resample;
pub mod rng;
pub mod solver;
pub mod validate;

pub use error::{Error, Result};
