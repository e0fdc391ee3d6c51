//! Lattice Monte Carlo for the multiplicative stochastic heat equation and KPZ
//! with long-range correlated noise on a periodic box.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod continuum;
pub mod error;
pub mod fft;
pub mod fluct;
pub mod grid;
pub mod homog;
pub mod noise;
pub mod oracle;
pub mod quad;
pub mod rng;
pub mod runner;
pub mod she;
pub mod stationary;
pub mod stats;

pub use error::{LabError, Result};
pub use grid::{FieldFrame, GridSpec};
