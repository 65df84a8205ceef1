//! Simulation and verification laboratory for layered robust imitation
//! learning: nominal/uncertain dynamical systems, a first-order imitation
//! trainer, a sampled-data adaptive rejection controller, and imitation-gap
//! metrology with Monte Carlo error bars.

pub mod config;
pub mod dynamics;
pub mod error;
pub mod l1drac;
pub mod metrics;
pub mod net;
pub mod numerics;
pub mod policy;
pub mod simulate;
pub mod tasil;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngStream, Vector};
