//! Poisson-Dirichlet weights, Ruelle cascades, replica overlap sampling and
//! Monte Carlo checks of the identities they satisfy.

pub mod cascade;
pub mod error;
pub mod ggi;
pub mod harness;
pub mod invariance;
pub mod overlap;
pub mod pd;
pub mod ultrametric;

pub use error::{Error, Result};
