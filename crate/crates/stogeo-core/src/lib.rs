//! Numerical toolkit for stochastic geometric mechanics on chart-based
//! Riemannian manifolds.
//!
//! The crate simulates Itô diffusions with the connection-corrected drift,
//! estimates mean and quadratic mean derivatives from path ensembles, solves
//! the Kolmogorov backward / Fokker-Planck forward equations on grids, builds
//! Bernstein (reciprocal) bridges through the log transform to the HJB
//! equation, transports vectors and covectors (parallel and damped) along
//! sampled paths, and evaluates the residuals of the stochastic dynamical
//! laws: stochastic Hamilton equations, stochastic Euler-Lagrange equation,
//! Noether charges and SDE symmetry determining equations.

// index loops over small tensor dimensions are the house style here
#![allow(clippy::needless_range_loop)]
#![allow(clippy::type_complexity)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod linalg;
pub mod mechanics;
pub mod pde;
pub mod rng;
pub mod secondorder;
pub mod symmetry;
pub mod transport;

pub use error::{CoreError, Result};
