//! Geometry toolkit for video point maps.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camsolve;
pub mod cli;
pub mod error;
pub mod geom;
pub mod latent;
pub mod loss;
pub mod metrics;
pub mod repr;
pub mod synth;

pub use error::{Error, Result};
