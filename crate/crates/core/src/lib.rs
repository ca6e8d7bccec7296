//! Monte Carlo laboratory for one-dimensional backward stochastic
//! differential equations with non-Lipschitz generators.

pub mod cli;
pub mod envelope;
pub mod error;
pub mod feynmankac;
pub mod generator;
pub mod paths;
pub mod regression;
pub mod representation;
pub mod solver;
pub mod stats;

pub use error::{BsdeError, FailureClass, Result};
