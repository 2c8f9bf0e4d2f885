//! Simulation and analysis toolkit for Distributed Stochastic Gradient Descent
//! over fixed communication graphs.

// Negated comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod cli;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod loss;
pub mod rng;
pub mod schedules;
pub mod stability;
pub mod vecops;

pub use error::{Error, Result};
