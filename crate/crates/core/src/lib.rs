//! Spatio-temporal Hawkes processes with sparse variational GP priors on the
//! background rate and the triggering kernel.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::large_enum_variant)]

pub mod baselines;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod hawkes_model;
pub mod kernels;
pub mod metrics_eval;
pub mod simulate;
pub mod sparse_gp;
pub mod vi;

pub use error::{Error, Result};
