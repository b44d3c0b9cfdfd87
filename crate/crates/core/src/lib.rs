//! Numerical laboratory for the polyharmonic operator `(-Δ)^l + V` with a
//! limit-periodic potential in the plane.

pub mod error;
pub mod lattice;
pub mod model_config;
pub mod potential;
pub mod bloch_oracle;
pub mod model;
pub mod perturbation;
pub mod isoenergetic;
pub mod resonance;
pub mod wavefield;
pub mod spectral_measure;

pub use error::{Error, Result};
