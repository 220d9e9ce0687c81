//! Reduced basis surrogates for hyperelastic computational homogenization.
//!
//! Microscopic stress fields from RVE solves are compressed with POD, and
//! the basis coefficients are regressed on the macroscopic stretch and
//! material parameters with Gaussian processes. The resulting model gives the
//! effective stress, its consistent tangent and the full microscopic field,
//! and plugs into a total Lagrangian macro solver.

pub mod error;
pub(crate) mod linalg;
pub mod tensor_mech;

pub use error::{Error, Result};
pub mod gpr;
pub mod io;
pub mod macro_fem;
pub mod micro_fem;
pub mod pod;
pub mod snapshot;
pub mod surrogate;
