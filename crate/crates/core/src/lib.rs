//! Construction and validation of exponential twists `Q* ∝ e^{−φ} dP` of
//! Markovian jump-diffusion reference measures.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmarks;
pub mod checks;
pub mod cli;
pub mod control;
pub mod error;
pub mod feynman_kac;
pub mod girsanov;
pub mod meanfield;
pub mod model;
pub mod path;
pub mod quadrature;
pub mod report;
pub mod stats;
pub mod twist;
pub mod value;

pub use error::{Error, Result};
