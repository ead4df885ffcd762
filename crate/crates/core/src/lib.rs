//! Simulation and statistical verification of quantum nondemolition
//! measurements with diffusive and counting output channels.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod conditioned;
pub mod ensemble;
pub mod error;
pub mod filter;
pub mod io;
pub mod model;
pub mod qdyn;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
