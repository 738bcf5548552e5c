//! Mean field equilibria of dynamic two-sided matching markets.
//!
//! The crate solves the coupled backward value / forward density system by
//! fixed-point iteration on uniform grids, calibrates initial quality
//! distributions from quantile tables, audits solutions against their
//! structural bounds, and cross-checks densities with an agent-based
//! Monte-Carlo simulation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod income;
pub mod market;
pub mod mc;
pub mod optim;
pub mod run;
pub mod solver;
pub mod theory;

pub use error::{Error, Result};
