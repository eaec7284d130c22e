//! Shared callback types for time-dependent scalar, vector and matrix fields.

use crate::linalg::SymMat;
use std::sync::Arc;

/// Scalar field `(t, x) -> f64`.
pub type ScalarField = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Vector field writing its components into `out`.
pub type VectorField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Symmetric matrix field `(t, x) -> SymMat`.
pub type MatrixField = Arc<dyn Fn(f64, &[f64]) -> SymMat + Send + Sync>;

pub fn zero_scalar() -> ScalarField {
    Arc::new(|_, _| 0.0)
}

pub fn zero_vector() -> VectorField {
    Arc::new(|_, _, out: &mut [f64]| out.fill(0.0))
}

pub fn constant_scalar(c: f64) -> ScalarField {
    Arc::new(move |_, _| c)
}
