//! Finite-spacing Monte Carlo laboratory for the critical 2D Ising
//! magnetization field, built on the FK random-cluster representation.

pub mod bits;
pub mod clusters;
pub mod error;
pub mod exec;
pub mod field;
pub mod io;
pub mod lattice;
pub mod nearcritical;
pub mod sampler;
pub mod stats;

pub use error::{Error, Result};
