//! Harmonic defect thermodynamics on periodic crystal supercells.
//!
//! The crate computes formation energies, vibrational entropies and harmonic
//! transition-state rates of point defects in Bravais lattices, decomposes
//! the entropy into per-site contributions, and measures how these quantities
//! converge as the periodic supercell grows.
//!
//! Modules, bottom to top:
//!
//! * [`lattice`]: lattice geometry, supercells, stencils, the dual grid and DFT.
//! * [`potentials`]: site potentials with derivatives up to order four.
//! * [`assembly`]: energies, gradients and sparse block Hessians.
//! * [`spectral`]: the kernels `F` and `F_N`, log-determinants, matrix logarithms.
//! * [`stationary`]: minimisers and index-1 saddles with spectral certificates.
//! * [`thermo`]: entropies, site decompositions, renormalisation and rates.
//! * [`harness`]: run configuration, N-sweeps, fits and output files.

pub mod assembly;
pub mod error;
pub mod harness;
pub mod lattice;
pub mod linalg;
pub mod potentials;
pub mod spectral;
pub mod stationary;
pub mod thermo;

pub use error::{Error, Result};
