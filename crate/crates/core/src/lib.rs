//! Discretization error laboratory for stochastic integrals driven by Brownian motion.

pub mod asymptotics;
pub mod brownian;
pub mod error;
pub mod error_lab;
pub mod euler;
pub mod harness;
pub mod hedging;
pub mod moments;
pub mod normal;
pub mod rng;
pub mod schemes;

pub use error::{Error, Result};
