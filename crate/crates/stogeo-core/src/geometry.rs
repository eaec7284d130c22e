//! Chart-based Riemannian manifold models.
//!
//! A model is a single chart with optional periodic coordinates. It supplies
//! the metric, Christoffel symbols of the Levi-Civita connection, the Riemann
//! curvature tensor and the Ricci tensor to every other module. Built-in
//! models carry analytic tensors; user conformal metrics fall back to
//! fourth-order central differences of the closed-form metric.
//!
//! Index conventions used throughout the crate:
//! * `christoffel`: `gamma[(i*d + j)*d + k] = Γ^i_{jk}` (symmetric in j,k),
//! * `riemann`: `riem[((i*d + j)*d + k)*d + l] = R^i_{jkl}`, the coefficient
//!   of `∂_i` in `R(∂_k, ∂_l) ∂_j`,
//! * `ricci_{jl} = R^k_{jkl}`.

use crate::error::{CoreError, Result};
use crate::linalg::SymMat;
use std::f64::consts::{PI, TAU};
use std::sync::Arc;

/// Step for fourth-order metric differences on user metrics.
const FD_METRIC_H: f64 = 1e-4;
/// Step for differentiating Christoffel symbols (curvature, Hessians).
const FD_GAMMA_H: f64 = 1e-3;
/// Default exclusion zone around the sphere chart poles, in radians.
pub const DEFAULT_POLE_MARGIN: f64 = 1e-3;

/// A validated point in a model's chart.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartPoint {
    coords: Vec<f64>,
}

impl ChartPoint {
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

type ScalarMap = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
enum ModelKind {
    Euclidean,
    /// Flat metric, every coordinate periodic with the given period.
    FlatTorus { period: f64 },
    /// Unit sphere in the (theta, phi) chart, g = diag(1, sin^2 theta).
    Sphere2 { pole_margin: f64 },
    /// Conformal metric g = e^{2 phi(x)} I on R^d, d in {1, 2}.
    Conformal { phi: ScalarMap },
}

/// Chart-based Riemannian manifold model. Immutable and shareable.
#[derive(Clone)]
pub struct ManifoldModel {
    dim: usize,
    kind: ModelKind,
    name: String,
}

/// Christoffel symbols and their first partials at a point.
#[derive(Debug, Clone)]
pub struct ConnectionData {
    pub dim: usize,
    /// `Γ^i_{jk}` at `(i*d + j)*d + k`.
    pub gamma: Vec<f64>,
    /// `R^i_{jkl}` at `((i*d + j)*d + k)*d + l`.
    pub riemann: Vec<f64>,
    pub ricci: SymMat,
}

impl ManifoldModel {
    pub fn euclidean(dim: usize) -> Self {
        assert!(dim >= 1);
        ManifoldModel {
            dim,
            kind: ModelKind::Euclidean,
            name: format!("euclidean:{dim}"),
        }
    }

    pub fn circle() -> Self {
        ManifoldModel {
            dim: 1,
            kind: ModelKind::FlatTorus { period: TAU },
            name: "circle".into(),
        }
    }

    pub fn torus(dim: usize) -> Self {
        assert!(dim >= 1);
        ManifoldModel {
            dim,
            kind: ModelKind::FlatTorus { period: TAU },
            name: format!("torus:{dim}"),
        }
    }

    pub fn sphere2() -> Self {
        Self::sphere2_with_margin(DEFAULT_POLE_MARGIN)
    }

    pub fn sphere2_with_margin(pole_margin: f64) -> Self {
        ManifoldModel {
            dim: 2,
            kind: ModelKind::Sphere2 { pole_margin },
            name: "sphere2".into(),
        }
    }

    /// Conformal metric `g = e^{2 phi} I` with user-supplied `phi`.
    pub fn conformal(dim: usize, tag: &str, phi: ScalarMap) -> Self {
        assert!(dim == 1 || dim == 2);
        ManifoldModel {
            dim,
            kind: ModelKind::Conformal { phi },
            name: format!("conformal{dim}d:{tag}"),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Period of coordinate `i`, if periodic.
    pub fn period(&self, i: usize) -> Option<f64> {
        match &self.kind {
            ModelKind::FlatTorus { period } => Some(*period),
            ModelKind::Sphere2 { .. } if i == 1 => Some(TAU),
            _ => None,
        }
    }

    pub fn is_flat(&self) -> bool {
        matches!(self.kind, ModelKind::Euclidean | ModelKind::FlatTorus { .. })
    }

    /// Wraps periodic coordinates into their fundamental interval in place.
    pub fn wrap(&self, x: &mut [f64]) {
        for i in 0..self.dim {
            if let Some(p) = self.period(i) {
                x[i] = x[i].rem_euclid(p);
            }
        }
    }

    /// Signed coordinate difference `a - b` honoring periodic wrap
    /// (minimal image per coordinate).
    pub fn coord_delta(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        for i in 0..self.dim {
            let mut d = a[i] - b[i];
            if let Some(p) = self.period(i) {
                d = d - (d / p).round() * p;
            }
            out[i] = d;
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        if x.len() != self.dim || x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match &self.kind {
            ModelKind::Sphere2 { pole_margin } => {
                x[0] > *pole_margin && x[0] < PI - *pole_margin
            }
            _ => true,
        }
    }

    /// Validates and wraps coordinates into a `ChartPoint`.
    pub fn point(&self, coords: &[f64]) -> Result<ChartPoint> {
        if coords.len() != self.dim {
            return Err(CoreError::Shape(format!(
                "point has {} coordinates, model {} needs {}",
                coords.len(),
                self.name,
                self.dim
            )));
        }
        let mut c = coords.to_vec();
        self.wrap(&mut c);
        if !self.contains(&c) {
            return Err(CoreError::Domain(format!(
                "point {c:?} outside chart domain of {}",
                self.name
            )));
        }
        Ok(ChartPoint { coords: c })
    }

    pub fn metric(&self, x: &[f64]) -> SymMat {
        let d = self.dim;
        match &self.kind {
            ModelKind::Euclidean | ModelKind::FlatTorus { .. } => SymMat::identity(d),
            ModelKind::Sphere2 { .. } => SymMat::diag(&[1.0, x[0].sin().powi(2)]),
            ModelKind::Conformal { phi } => {
                let f = (2.0 * phi(x)).exp();
                SymMat::diag(&vec![f; d])
            }
        }
    }

    pub fn inverse_metric(&self, x: &[f64]) -> Result<SymMat> {
        match &self.kind {
            ModelKind::Euclidean | ModelKind::FlatTorus { .. } => {
                Ok(SymMat::identity(self.dim))
            }
            ModelKind::Sphere2 { .. } => {
                let s = x[0].sin();
                if s.abs() < 1e-12 {
                    return Err(CoreError::Numeric("singular metric at sphere pole".into()));
                }
                Ok(SymMat::diag(&[1.0, 1.0 / (s * s)]))
            }
            ModelKind::Conformal { phi } => {
                let f = (-2.0 * phi(x)).exp();
                Ok(SymMat::diag(&vec![f; self.dim]))
            }
        }
    }

    /// Symmetric positive-definite square root of the inverse metric:
    /// `sigma sigma^T = g^{-1}(x)`.
    pub fn metric_sqrt(&self, x: &[f64]) -> Result<SymMat> {
        if !self.contains(x) {
            return Err(CoreError::Domain(format!(
                "metric_sqrt outside chart domain of {}",
                self.name
            )));
        }
        match &self.kind {
            ModelKind::Euclidean | ModelKind::FlatTorus { .. } => {
                Ok(SymMat::identity(self.dim))
            }
            ModelKind::Sphere2 { .. } => {
                let s = x[0].sin();
                Ok(SymMat::diag(&[1.0, 1.0 / s]))
            }
            ModelKind::Conformal { phi } => {
                let f = (-phi(x)).exp();
                Ok(SymMat::diag(&vec![f; self.dim]))
            }
        }
    }

    /// Levi-Civita Christoffel symbols `Γ^i_{jk}`.
    pub fn christoffel(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !self.contains(x) {
            return Err(CoreError::Domain(format!(
                "christoffel outside chart domain of {}",
                self.name
            )));
        }
        let d = self.dim;
        match &self.kind {
            ModelKind::Euclidean | ModelKind::FlatTorus { .. } => Ok(vec![0.0; d * d * d]),
            ModelKind::Sphere2 { .. } => {
                let (sin_t, cos_t) = (x[0].sin(), x[0].cos());
                let mut g = vec![0.0; 8];
                // Γ^θ_{φφ} = -sin θ cos θ, Γ^φ_{θφ} = Γ^φ_{φθ} = cot θ
                g[idx3(d, 0, 1, 1)] = -sin_t * cos_t;
                g[idx3(d, 1, 0, 1)] = cos_t / sin_t;
                g[idx3(d, 1, 1, 0)] = cos_t / sin_t;
                Ok(g)
            }
            ModelKind::Conformal { .. } => self.christoffel_fd(x),
        }
    }

    /// Christoffel symbols from finite differences of the metric:
    /// `Γ^i_{jk} = 1/2 g^{il} (∂_j g_{lk} + ∂_k g_{jl} - ∂_l g_{jk})`.
    fn christoffel_fd(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        let ginv = self.inverse_metric(x)?;
        // dg[l][(j,k)] = ∂_l g_{jk}
        let mut dg = vec![0.0; d * d * d];
        let mut xs = x.to_vec();
        for l in 0..d {
            let x0 = xs[l];
            let mut stencil = [SymMat::zeros(d), SymMat::zeros(d), SymMat::zeros(d), SymMat::zeros(d)];
            for (s, off) in [-2.0f64, -1.0, 1.0, 2.0].iter().enumerate() {
                xs[l] = x0 + off * FD_METRIC_H;
                stencil[s] = self.metric(&xs);
            }
            xs[l] = x0;
            for j in 0..d {
                for k in 0..d {
                    let der = (-stencil[3].get(j, k) + 8.0 * stencil[2].get(j, k)
                        - 8.0 * stencil[1].get(j, k)
                        + stencil[0].get(j, k))
                        / (12.0 * FD_METRIC_H);
                    dg[idx3(d, l, j, k)] = der;
                }
            }
        }
        let mut gamma = vec![0.0; d * d * d];
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let mut s = 0.0;
                    for l in 0..d {
                        s += ginv.get(i, l)
                            * (dg[idx3(d, j, l, k)] + dg[idx3(d, k, j, l)] - dg[idx3(d, l, j, k)]);
                    }
                    gamma[idx3(d, i, j, k)] = 0.5 * s;
                }
            }
        }
        Ok(gamma)
    }

    /// First partials of the Christoffel symbols: `out[(l, i, j, k)] = ∂_l Γ^i_{jk}`.
    pub fn christoffel_partial(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        match &self.kind {
            ModelKind::Euclidean | ModelKind::FlatTorus { .. } => Ok(vec![0.0; d * d * d * d]),
            ModelKind::Sphere2 { .. } => {
                let t = x[0];
                let mut out = vec![0.0; 16];
                // ∂_θ Γ^θ_{φφ} = -cos 2θ, ∂_θ Γ^φ_{θφ} = -1/sin^2 θ
                out[idx4(d, 0, 0, 1, 1)] = -(2.0 * t).cos();
                let dcot = -1.0 / (t.sin() * t.sin());
                out[idx4(d, 0, 1, 0, 1)] = dcot;
                out[idx4(d, 0, 1, 1, 0)] = dcot;
                Ok(out)
            }
            ModelKind::Conformal { .. } => {
                let mut out = vec![0.0; d * d * d * d];
                let mut xs = x.to_vec();
                for l in 0..d {
                    let x0 = xs[l];
                    let mut stencil = Vec::with_capacity(4);
                    for off in [-2.0f64, -1.0, 1.0, 2.0] {
                        xs[l] = x0 + off * FD_GAMMA_H;
                        stencil.push(self.christoffel(&xs)?);
                    }
                    xs[l] = x0;
                    for i in 0..d * d * d {
                        out[l * d * d * d + i] = (-stencil[3][i] + 8.0 * stencil[2][i]
                            - 8.0 * stencil[1][i]
                            + stencil[0][i])
                            / (12.0 * FD_GAMMA_H);
                    }
                }
                Ok(out)
            }
        }
    }

    /// Riemann tensor `R^i_{jkl}` and Ricci tensor `R^k_{jkl}`.
    pub fn curvature(&self, x: &[f64]) -> Result<(Vec<f64>, SymMat)> {
        if !self.contains(x) {
            return Err(CoreError::Domain(format!(
                "curvature outside chart domain of {}",
                self.name
            )));
        }
        let d = self.dim;
        match &self.kind {
            ModelKind::Euclidean | ModelKind::FlatTorus { .. } => {
                Ok((vec![0.0; d * d * d * d], SymMat::zeros(d)))
            }
            ModelKind::Sphere2 { .. } => {
                // Constant curvature K = 1: R^i_{jkl} = δ^i_k g_{lj} - δ^i_l g_{kj}.
                let g = self.metric(x);
                let mut riem = vec![0.0; 16];
                for i in 0..2 {
                    for j in 0..2 {
                        for k in 0..2 {
                            for l in 0..2 {
                                let mut v = 0.0;
                                if i == k {
                                    v += g.get(l, j);
                                }
                                if i == l {
                                    v -= g.get(k, j);
                                }
                                riem[idx4(d, i, j, k, l)] = v;
                            }
                        }
                    }
                }
                let ricci = ricci_from_riemann(d, &riem);
                Ok((riem, ricci))
            }
            ModelKind::Conformal { .. } => {
                let gamma = self.christoffel(x)?;
                let dgamma = self.christoffel_partial(x)?;
                let riem = riemann_from_christoffel(d, &gamma, &dgamma);
                let ricci = ricci_from_riemann(d, &riem);
                Ok((riem, ricci))
            }
        }
    }

    /// Connection and curvature data bundled for path loops.
    pub fn connection_data(&self, x: &[f64]) -> Result<ConnectionData> {
        let gamma = self.christoffel(x)?;
        let (riemann, ricci) = self.curvature(x)?;
        Ok(ConnectionData {
            dim: self.dim,
            gamma,
            riemann,
            ricci,
        })
    }

    /// Metric-compatibility residual `max |∂_k g_{ij} - Γ^l_{ki} g_{lj} - Γ^l_{kj} g_{il}|`
    /// with fourth-order differences; a construction check for the symbols.
    pub fn metric_compatibility_residual(&self, x: &[f64]) -> Result<f64> {
        let d = self.dim;
        let gamma = self.christoffel(x)?;
        let mut xs = x.to_vec();
        let mut worst = 0.0f64;
        for k in 0..d {
            let x0 = xs[k];
            let mut stencil = Vec::with_capacity(4);
            for off in [-2.0f64, -1.0, 1.0, 2.0] {
                xs[k] = x0 + off * FD_METRIC_H;
                stencil.push(self.metric(&xs));
            }
            xs[k] = x0;
            let g = self.metric(x);
            for i in 0..d {
                for j in 0..d {
                    let dg = (-stencil[3].get(i, j) + 8.0 * stencil[2].get(i, j)
                        - 8.0 * stencil[1].get(i, j)
                        + stencil[0].get(i, j))
                        / (12.0 * FD_METRIC_H);
                    let mut corr = 0.0;
                    for l in 0..d {
                        corr += gamma[idx3(d, l, k, i)] * g.get(l, j)
                            + gamma[idx3(d, l, k, j)] * g.get(i, l);
                    }
                    worst = worst.max((dg - corr).abs());
                }
            }
        }
        Ok(worst)
    }
}

impl std::fmt::Debug for ManifoldModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ManifoldModel({})", self.name)
    }
}

#[inline]
pub fn idx3(d: usize, i: usize, j: usize, k: usize) -> usize {
    (i * d + j) * d + k
}

#[inline]
pub fn idx4(d: usize, i: usize, j: usize, k: usize, l: usize) -> usize {
    ((i * d + j) * d + k) * d + l
}

/// `R^i_{jkl} = ∂_k Γ^i_{lj} - ∂_l Γ^i_{kj} + Γ^i_{km} Γ^m_{lj} - Γ^i_{lm} Γ^m_{kj}`.
pub fn riemann_from_christoffel(d: usize, gamma: &[f64], dgamma: &[f64]) -> Vec<f64> {
    let mut riem = vec![0.0; d * d * d * d];
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    let mut v = dgamma[k * d * d * d + idx3(d, i, l, j)]
                        - dgamma[l * d * d * d + idx3(d, i, k, j)];
                    for m in 0..d {
                        v += gamma[idx3(d, i, k, m)] * gamma[idx3(d, m, l, j)]
                            - gamma[idx3(d, i, l, m)] * gamma[idx3(d, m, k, j)];
                    }
                    riem[idx4(d, i, j, k, l)] = v;
                }
            }
        }
    }
    riem
}

pub fn ricci_from_riemann(d: usize, riem: &[f64]) -> SymMat {
    let mut ricci = SymMat::zeros(d);
    for j in 0..d {
        for l in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += riem[idx4(d, k, j, k, l)];
            }
            ricci.data[j * d + l] = s;
        }
    }
    ricci
}
