//! Std companion to `epd-core`: a thread-pool executor, synthetic evaluation
//! cost, latency benchmarks, file formats, experiment configs and the
//! experiment driver behind the `epd` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod config;
pub mod cost;
pub mod error;
pub mod experiment;
pub mod io;
pub mod pool;

pub use error::{Error, Result};
