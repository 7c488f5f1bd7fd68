//! Nonlinear system identification toolkit: neural state-space models,
//! nonlinear ARX and Hammerstein-Wiener models, dictionary-based sparse
//! regressor selection, and an extended Kalman filter whose Jacobians come
//! from the built-in automatic differentiation engine.

// NaN must fail range checks, so `!(x > 0.0)` is deliberate
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod benchgen;
pub mod cli;
pub mod document;
pub mod ekf;
pub mod error;
pub mod hw;
pub mod interp;
pub mod mlp;
pub mod neural_ss;
pub mod nlarx;
pub mod optim;
pub mod regressors;
pub mod signal_data;

pub use error::{Error, ErrorKind, Result};

/// Formats a number with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}
