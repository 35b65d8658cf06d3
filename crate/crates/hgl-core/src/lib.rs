//! Numerical laboratory for the random conductance model on `Z^d`.
//!
//! The crate covers discrete calculus on tori and boxes, Gaussian
//! environments, conjugate-gradient solves, correctors and flux correctors,
//! homogenized Green functions, Helffer-Sjostrand covariances, limiting
//! variance quadratures, Monte Carlo fluctuation experiments and brute-force
//! checks of lattice convolution bounds.

pub mod bounds;
pub mod corrector;
pub mod environment;
pub mod error;
pub mod fft;
pub mod fluctuation;
pub mod greens;
pub mod hs;
pub mod kernels;
pub mod lattice;
pub mod snapshot;
pub mod solver;
pub mod stats;

pub use environment::{ConductanceLaw, Environment};
pub use error::{HglError, Result};
pub use lattice::{Boundary, Edge, EdgeField, LatticeGeometry, SiteField};
pub use solver::{GreenColumn, Preconditioner, Solution, SolverConfig};
pub use snapshot::Snapshot;
pub use stats::{Estimate, RunningStats};
