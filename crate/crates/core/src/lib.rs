//! Bayesian inversion of coefficient fields in time-fractional diffusion.

pub mod bayes;
pub mod caputo;
pub mod config;
pub mod error;
pub mod forward;
pub mod gmsfem;
pub mod gpc;
pub mod io;
pub mod linalg;
pub mod mesh;
pub mod optimizer;
pub mod pipeline;
pub mod random_field;

pub use error::{Error, Result};
