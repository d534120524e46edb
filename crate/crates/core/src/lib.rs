//! Inverse uncertainty quantification of computer-model calibration parameters.

pub mod bayes;
pub mod circe;
pub mod dipe;
pub mod error;
pub mod gp;
pub mod harness;
pub mod iprem;
pub mod mcda;
pub mod mcmc;
pub mod model;
pub mod stats;

pub use error::{IuqError, Result};
