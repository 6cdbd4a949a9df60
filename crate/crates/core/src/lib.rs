//! Physics-guided smoothing of DIC displacement measurements.
//!
//! Noisy nodal displacements are fitted with reproducing-kernel shape
//! functions, compressive normal strains are penalized away with an Adam
//! refinement, and the resulting fields can be pushed through a peridynamic
//! constitutive operator.

pub mod error;
pub mod field_recon;
pub mod grid;
pub mod peridynamic;
pub mod pgs_opt;
pub mod rk_basis;
pub mod cli;
pub mod data_io;

pub use error::{Error, Result};
