//! Agreement diagnostics between a neural classifier and classical probes
//! fitted on its intermediate representations.

// Negated float comparisons in validation also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod container;
pub mod data;
mod error;
pub mod harness;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod probes;

pub use error::{Error, Result};
