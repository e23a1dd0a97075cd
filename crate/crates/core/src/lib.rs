//! Empirical-Bayes spatial priors for voxelwise regression on a 3D lattice.
//!
//! Activity coefficients get Gaussian Markov random field priors built from
//! the lattice Laplacian (ICAR, SPDE Matérn, anisotropic Matérn); the noise is
//! AR(P) per voxel. Hyperparameters are fitted by stochastic-gradient ascent
//! on the marginal posterior, with traces estimated by Hutchinson probes and
//! all solves done by preconditioned conjugate gradients.

pub mod cli;
pub mod eb;
pub mod error;
pub mod evalsim;
pub mod glm;
pub mod io;
pub mod krylov;
pub mod lattice;
pub mod posterior;
pub mod prior;
pub mod rng;
pub mod sparse;
mod par;

pub use error::{Error, Result};
