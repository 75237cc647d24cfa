//! Multivariate distributional regression through an implicit Gaussian copula
//! process.
//!
//! The copula is the implicit copula of a seemingly unrelated regression whose
//! coefficients carry a multivariate horseshoe prior; it is estimated by
//! factor-covariance Gaussian variational inference on an augmented posterior.
//! Marginal distributions are estimated separately, so every predictive
//! distribution is marginally calibrated.
//!
//! The crate is `no_std` and only needs an allocator. File formats, the command
//! line and any threading live in the companion `regcopula-cli` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod basis;
pub mod bench;
pub mod error;
pub mod lfi;
pub mod linalg;
pub mod margins;
pub mod math;
pub mod model;
pub mod predict;
pub mod rng;
pub mod vi;

pub use error::{Error, Result};
