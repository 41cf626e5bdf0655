//! Decoupled variational Gaussian-process regression.
//!
//! The posterior mean uses a large basis (`M_α`) and the posterior
//! covariance a small one (`M_β`), so a stochastic gradient of the
//! variational lower bound costs time linear in `M_α`.

pub mod cli;
pub mod error;
pub mod kernels;
pub mod model;
pub mod optimizer;
pub mod oracles;
pub mod trainer;

pub use error::{DgpError, Result};
