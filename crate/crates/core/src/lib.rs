//! Hierarchical Bayesian fusion of operational modal identification results.

pub mod error;
pub mod evidence;
pub mod gaussian;
pub mod hierarchical;
pub mod io;
pub mod linalg;
pub mod modal;
pub mod optim;
pub mod spectral;
pub mod synth;
pub mod tmcmc;

pub use error::{Error, Result};
