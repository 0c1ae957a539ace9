//! Numerical toolkit for semi-toric integrable systems: period lattices of
//! Liouville tori, the logarithmically regularized 1-form near a focus-focus
//! singularity, its symplectic invariant, and topological monodromy.

pub mod critical;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod models;
pub mod monodromy;
pub mod periods;
pub mod regular;
pub mod rk45;

pub use error::{Error, Result};
