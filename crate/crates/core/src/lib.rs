//! Maximum-likelihood linear mixed models for longitudinal data with
//! left-censored responses.

pub mod cli;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod model;
pub mod optimizer;
pub mod likelihood;
pub mod quadrature;
pub mod simulator;
pub mod theta;

pub use error::{Error, Result};
