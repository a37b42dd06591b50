//! Estimation of the invariant measure of a diffusion on a compact manifold
//! from one observed trajectory, by kernel smoothing of the occupation
//! measure, together with the Wasserstein, spectral and likelihood-ratio
//! tooling used to measure how fast such estimates converge.

pub mod densities;
pub mod diffusion;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod geometry;
pub mod kernels;
pub mod quad;
pub mod seeding;
pub mod spectral;
pub mod transport;

mod spec_string;

pub use error::{Error, Result};
pub use geometry::{DistanceMode, Manifold, ManifoldPoint, QuadratureGrid};
