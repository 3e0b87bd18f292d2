//! Soft local times on random interlacements: exact lattice potential theory,
//! walk and excursion simulation, the soft-local-times coupling engine, and the
//! experiment harness built on top of them.

pub mod cli;
pub mod clothesline;
pub mod endpoint_densities;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod interlacements;
pub mod potential;
pub mod quadrature;
pub mod slt_engine;
pub mod symmetry;
pub mod walk;

pub use error::{LabError, Result};
