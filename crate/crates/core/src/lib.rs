//! Discrete-time optimal control on grids: finite-horizon dynamic
//! programming, dissipativity certificates, turnpike measurements and
//! economic model predictive control.

// `!(a <= b)` is used on purpose: it treats NaN as a failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dissipativity;
pub mod dp;
pub mod error;
pub mod export;
pub mod grid;
pub mod lq;
pub mod mpc;
pub mod system;
pub mod turnpike;

pub use error::{Error, Result};
