//! Simulation, estimation, testing and forecasting for the first-order
//! mixture binomial / negative-binomial thinning threshold INAR process.

pub mod cls;
pub mod cml;
mod optim;
pub mod error;
pub mod forecast;
pub mod hypothesis;
pub mod io;
pub mod model;
pub mod study;
pub mod threshold;

pub use error::{Error, Result};
