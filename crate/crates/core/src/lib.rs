//! Numerical laboratory for the stochastic point vortex model with common
//! noise on the 2-torus: interacting particles, their mean-field stochastic
//! Navier-Stokes limit, the limiting fluctuation SPDE, and the statistics
//! that compare them.

pub mod error;
pub mod io;
pub mod kernel;
pub mod particles;
pub mod rng;
pub mod runs;
pub mod scenario;
pub mod spde;
pub mod sigma;
pub mod spectral;
pub mod stats;
pub mod torus;

pub use error::{Result, VflError};
