//! Numerical toolkit for fully coupled mean-field forward-backward SDEs with
//! Poisson jumps: particle simulation, regression-based backward induction,
//! continuation solvers, maximum-principle diagnostics and the closed-form
//! portfolio / linear-quadratic applications.

pub mod acceptance;
pub mod applications;
pub mod bsde;
pub mod coefficients;
pub mod continuation;
pub mod control;
pub mod error;
pub mod grid;
pub mod maximum_principle;
pub mod monotonicity;
pub mod particles;
pub mod registry;
pub mod report;

pub use error::{Error, Result};
