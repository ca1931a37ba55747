//! Numerical closing-lemma machinery for partially hyperbolic maps with a
//! one-dimensional center bundle on flat tori.

pub mod center_curves;
pub mod closing;
pub mod degree;
pub mod error;
pub mod harness;
pub mod geometry;
pub mod invariant_manifolds;
pub mod perturbation;
pub mod shadowing;
pub mod splitting;
pub mod systems;

pub use error::{PhError, PhResult};
