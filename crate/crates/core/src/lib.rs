//! Reverse-mode automatic differentiation with multi-lane replay, applied to
//! Monte Carlo calibration objectives of the form
//! `G = 1/2 sum_i (E y_i - C_i)^2`.
//!
//! - [`tape`]: record a scalar program, replay it, run seeded reverse sweeps.
//! - [`kernel`]: freeze a tape and execute it over `c` lanes at once.
//! - [`expectation`]: two-pass gradient of `G` and an expectation-aware
//!   backward oracle.
//! - [`heston`]: Heston stochastic local volatility program recorder.
//! - [`calibrate`]: projected gradient descent with Armijo backtracking.
//! - [`bench`]: cost coefficients of the forward and reverse kernels.
//! - [`cli`]: command-line front end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod calibrate;
pub mod cli;
pub mod error;
pub mod expectation;
pub mod heston;
pub mod kernel;
pub mod rng;
pub mod tape;

pub use error::{Error, Result};
