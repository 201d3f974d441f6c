//! Ensemble parallel direction (EPD) sampling for probability-flow ODEs.
//!
//! The crate is `no_std` (with `alloc`) and holds everything that is pure
//! arithmetic: the analytic Gaussian-mixture noise oracle, time schedules,
//! the training-free baseline steps, the EPD step and its multistep plugin,
//! and the distillation loop that fits EPD parameters against a fine teacher.
//!
//! All sampling runs under the convention `sigma(t) = t`, `s(t) = 1`, so the
//! ODE being integrated is `dx/dt = eps(x, t)`.
//!
//! Concurrency enters only through the [`exec::Executor`] trait; the
//! `epd-tools` crate supplies a thread-pool implementation.

#![no_std]
// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod distill;
pub mod epd;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod oracle;
pub mod schedule;
pub mod solvers;

pub use error::Error;

/// A state or direction vector in data space.
pub type State = alloc::vec::Vec<f64>;
