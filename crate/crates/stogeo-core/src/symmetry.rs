//! Stochastic prolongation of projectable vector fields and the
//! determining-equation residuals that certify (or refute) infinitesimal
//! symmetries of an Itô SDE's generator.
//!
//! Everything is evaluated numerically on sample lattices; no symbolic
//! solving. The generator is addressed as the pair `(𝔟, a)` of modified
//! drift and squared diffusion.

use crate::error::{CoreError, Result};
use crate::fields::{MatrixField, VectorField};
use crate::geometry::{idx3, idx4, ManifoldModel};
use crate::linalg::SymMat;
use std::sync::Arc;

/// Space-time vector field `V = V⁰(t) ∂_t + V^i(t, x) ∂_i` with `V⁰`
/// depending on time only. Derivatives come from the optional analytic
/// callbacks when supplied, central differences otherwise; the tight
/// determining-equation tolerances (1e-10) need the analytic route, the
/// difference route floors out near 1e-6 from roundoff in the second
/// derivatives.
#[derive(Clone)]
pub struct ProjectableVectorField {
    pub v0: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub v: VectorField,
    pub dim: usize,
    pub v0_dot_fn: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
    /// `∂_t V^i`.
    pub v_dt_fn: Option<VectorField>,
    /// Jacobian with layout `out[(j, i)] = ∂_j V^i`.
    pub v_jac_fn: Option<Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>>,
    /// Second derivatives with layout `out[(j, k, i)] = ∂_j ∂_k V^i`.
    pub v_hess_fn: Option<Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>>,
}

const FD_REL: f64 = 1e-5;

impl ProjectableVectorField {
    pub fn new(dim: usize, v0: Arc<dyn Fn(f64) -> f64 + Send + Sync>, v: VectorField) -> Self {
        ProjectableVectorField {
            v0,
            v,
            dim,
            v0_dot_fn: None,
            v_dt_fn: None,
            v_jac_fn: None,
            v_hess_fn: None,
        }
    }

    pub fn time_translation(dim: usize) -> Self {
        let mut f = Self::new(dim, Arc::new(|_| 1.0), crate::fields::zero_vector());
        f.v0_dot_fn = Some(Arc::new(|_| 0.0));
        f.v_dt_fn = Some(crate::fields::zero_vector());
        f.v_jac_fn = Some(Arc::new(|_t, _x, out: &mut [f64]| out.fill(0.0)));
        f.v_hess_fn = Some(Arc::new(|_t, _x, out: &mut [f64]| out.fill(0.0)));
        f
    }

    pub fn space_only(dim: usize, v: VectorField) -> Self {
        let mut f = Self::new(dim, Arc::new(|_| 0.0), v);
        f.v0_dot_fn = Some(Arc::new(|_| 0.0));
        f.v_dt_fn = Some(crate::fields::zero_vector());
        f
    }

    fn h_at(s: f64) -> f64 {
        FD_REL * s.abs().max(1.0)
    }

    pub fn v0_dot(&self, t: f64) -> f64 {
        if let Some(f) = &self.v0_dot_fn {
            return f(t);
        }
        let h = Self::h_at(t);
        ((self.v0)(t + h) - (self.v0)(t - h)) / (2.0 * h)
    }

    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.v)(t, x, out);
    }

    pub fn dt(&self, t: f64, x: &[f64], out: &mut [f64]) {
        if let Some(f) = &self.v_dt_fn {
            f(t, x, out);
            return;
        }
        let h = Self::h_at(t);
        let d = self.dim;
        let mut p = vec![0.0; d];
        let mut m = vec![0.0; d];
        (self.v)(t + h, x, &mut p);
        (self.v)(t - h, x, &mut m);
        for i in 0..d {
            out[i] = (p[i] - m[i]) / (2.0 * h);
        }
    }

    /// `out[(j, i)] = ∂_j V^i`.
    pub fn dx(&self, t: f64, x: &[f64], out: &mut [f64]) {
        if let Some(f) = &self.v_jac_fn {
            f(t, x, out);
            return;
        }
        let d = self.dim;
        let mut xs = x.to_vec();
        let mut p = vec![0.0; d];
        let mut m = vec![0.0; d];
        for j in 0..d {
            let h = Self::h_at(x[j]);
            let x0 = xs[j];
            xs[j] = x0 + h;
            (self.v)(t, &xs, &mut p);
            xs[j] = x0 - h;
            (self.v)(t, &xs, &mut m);
            xs[j] = x0;
            for i in 0..d {
                out[j * d + i] = (p[i] - m[i]) / (2.0 * h);
            }
        }
    }

    /// `out[(j, k, i)] = ∂_j ∂_k V^i`.
    pub fn dxx(&self, t: f64, x: &[f64], out: &mut [f64]) {
        if let Some(f) = &self.v_hess_fn {
            f(t, x, out);
            return;
        }
        let d = self.dim;
        let mut xs = x.to_vec();
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        let mut c = vec![0.0; d];
        (self.v)(t, x, &mut c);
        for j in 0..d {
            let h = Self::h_at(x[j]);
            let x0 = xs[j];
            xs[j] = x0 + h;
            (self.v)(t, &xs, &mut a);
            xs[j] = x0 - h;
            (self.v)(t, &xs, &mut b);
            xs[j] = x0;
            for i in 0..d {
                out[idx3(d, j, j, i)] = (a[i] - 2.0 * c[i] + b[i]) / (h * h);
            }
        }
        for j in 0..d {
            for k in (j + 1)..d {
                let hj = Self::h_at(x[j]);
                let hk = Self::h_at(x[k]);
                let (xj, xk) = (xs[j], xs[k]);
                for i in 0..d {
                    out[idx3(d, j, k, i)] = 0.0;
                }
                for (sj, sk) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    xs[j] = xj + sj * hj;
                    xs[k] = xk + sk * hk;
                    (self.v)(t, &xs, &mut a);
                    for i in 0..d {
                        out[idx3(d, j, k, i)] += sj * sk * a[i] / (4.0 * hj * hk);
                    }
                }
                xs[j] = xj;
                xs[k] = xk;
                for i in 0..d {
                    out[idx3(d, k, j, i)] = out[idx3(d, j, k, i)];
                }
            }
        }
    }
}

/// Jet-point data for prolongation: `(t, x, Dx, Qx)`.
pub struct JetPoint<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub dx: &'a [f64],
    pub qx: &'a SymMat,
}

/// First prolongation coefficients of a projectable field at a jet point:
/// `V1^i = 𝐃_t V^i - V̇⁰ D^i x` and
/// `V2^{jk} = ∂_i V^j Q^{ik} + ∂_i V^k Q^{ij} - V̇⁰ Q^{jk}`,
/// with `𝐃_t = ∂_t + D^i x ∂_i + 1/2 Q^{jk} x ∂_j ∂_k`.
pub fn prolong(vf: &ProjectableVectorField, j: &JetPoint) -> (Vec<f64>, SymMat) {
    let d = vf.dim;
    let mut vt = vec![0.0; d];
    vf.dt(j.t, j.x, &mut vt);
    let mut vx = vec![0.0; d * d];
    vf.dx(j.t, j.x, &mut vx);
    let mut vxx = vec![0.0; d * d * d];
    vf.dxx(j.t, j.x, &mut vxx);
    let v0dot = vf.v0_dot(j.t);

    let mut v1 = vec![0.0; d];
    for i in 0..d {
        let mut s = vt[i];
        for jj in 0..d {
            s += vx[jj * d + i] * j.dx[jj];
            for k in 0..d {
                s += 0.5 * vxx[idx3(d, jj, k, i)] * j.qx.get(jj, k);
            }
        }
        v1[i] = s - v0dot * j.dx[i];
    }
    let mut v2 = SymMat::zeros(d);
    for jj in 0..d {
        for k in jj..d {
            let mut s = -v0dot * j.qx.get(jj, k);
            for i in 0..d {
                s += vx[i * d + jj] * j.qx.get(i, k) + vx[i * d + k] * j.qx.get(i, jj);
            }
            v2.set(jj, k, s);
        }
    }
    (v1, v2)
}

/// Connection prolongation coefficient:
/// `V_∇^i = (∂_t + D_∇x^j ∂_j) V^i
///          + 1/2 Q^{jk} [∇²_{∂j,∂k} V̄ + R(V̄, ∂_j) ∂_k]^i - V̇⁰ D_∇x^i`.
pub fn prolong_nabla(
    vf: &ProjectableVectorField,
    model: &ManifoldModel,
    t: f64,
    x: &[f64],
    dnx: &[f64],
    qx: &SymMat,
) -> Result<Vec<f64>> {
    let d = vf.dim;
    let gamma = model.christoffel(x)?;
    let dgamma = model.christoffel_partial(x)?;
    let (riem, _) = model.curvature(x)?;

    let mut vt = vec![0.0; d];
    vf.dt(t, x, &mut vt);
    let mut vx = vec![0.0; d * d];
    vf.dx(t, x, &mut vx);
    let mut vxx = vec![0.0; d * d * d];
    vf.dxx(t, x, &mut vxx);
    let mut vval = vec![0.0; d];
    vf.eval(t, x, &mut vval);
    let v0dot = vf.v0_dot(t);

    // W^i_k = (∇_k V)^i = ∂_k V^i + Γ^i_{km} V^m
    let w = |i: usize, k: usize| -> f64 {
        let mut s = vx[k * d + i];
        for m in 0..d {
            s += gamma[idx3(d, i, k, m)] * vval[m];
        }
        s
    };

    let mut out = vec![0.0; d];
    for i in 0..d {
        let mut s = vt[i];
        for j in 0..d {
            s += dnx[j] * vx[j * d + i];
        }
        for j in 0..d {
            for k in 0..d {
                // (∇²_{j,k} V)^i = ∂_j W^i_k + Γ^i_{jm} W^m_k - Γ^m_{jk} W^i_m
                let mut hess = vxx[idx3(d, j, k, i)];
                for m in 0..d {
                    hess += dgamma[j * d * d * d + idx3(d, i, k, m)] * vval[m]
                        + gamma[idx3(d, i, k, m)] * vx[j * d + m];
                    hess += gamma[idx3(d, i, j, m)] * w(m, k) - gamma[idx3(d, m, j, k)] * w(i, m);
                }
                // R(V̄, ∂_j) ∂_k = V^m R(∂_m, ∂_j) ∂_k = V^m R^i_{kmj} ∂_i
                let mut curv = 0.0;
                for m in 0..d {
                    curv += vval[m] * riem[idx4(d, i, k, m, j)];
                }
                s += 0.5 * qx.get(j, k) * (hess + curv);
            }
        }
        out[i] = s - v0dot * dnx[i];
    }
    Ok(out)
}

/// Generator fields `(𝔟, a)` of the SDE under scrutiny.
#[derive(Clone)]
pub struct SdeFields {
    pub bfrak: VectorField,
    pub a: MatrixField,
    pub dim: usize,
}

/// Sample lattice: a box per dimension with a fixed count, times a time
/// interval.
#[derive(Debug, Clone)]
pub struct SampleLattice {
    pub boxes: Vec<(f64, f64)>,
    pub points_per_dim: usize,
    pub t_range: (f64, f64),
    pub t_points: usize,
}

impl SampleLattice {
    pub fn line(min: f64, max: f64) -> Self {
        SampleLattice {
            boxes: vec![(min, max)],
            points_per_dim: 32,
            t_range: (0.0, 1.0),
            t_points: 16,
        }
    }

    fn space_count(&self) -> usize {
        self.points_per_dim.pow(self.boxes.len() as u32)
    }

    fn coord(&self, idx: usize, out: &mut [f64]) {
        let mut rem = idx;
        for (k, &(lo, hi)) in self.boxes.iter().enumerate().rev() {
            let i = rem % self.points_per_dim;
            rem /= self.points_per_dim;
            out[k] = if self.points_per_dim == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * i as f64 / (self.points_per_dim - 1) as f64
            };
        }
    }

    fn time(&self, k: usize) -> f64 {
        if self.t_points == 1 {
            0.5 * (self.t_range.0 + self.t_range.1)
        } else {
            self.t_range.0
                + (self.t_range.1 - self.t_range.0) * k as f64 / (self.t_points - 1) as f64
        }
    }
}

/// Sup-norms of the two determining-equation residuals over a lattice,
/// together with the magnitude scale of the individual terms.
#[derive(Debug, Clone)]
pub struct DeterminingReport {
    pub r1_sup: f64,
    pub r2_sup: f64,
    pub term_scale: f64,
    pub samples: usize,
}

impl DeterminingReport {
    pub fn max_residual(&self) -> f64 {
        self.r1_sup.max(self.r2_sup)
    }
}

fn field_dt(f: &VectorField, t: f64, x: &[f64], d: usize, out: &mut [f64]) {
    let h = FD_REL * t.abs().max(1.0);
    let mut p = vec![0.0; d];
    let mut m = vec![0.0; d];
    f(t + h, x, &mut p);
    f(t - h, x, &mut m);
    for i in 0..d {
        out[i] = (p[i] - m[i]) / (2.0 * h);
    }
}

fn field_dx(f: &VectorField, t: f64, x: &[f64], d: usize, out: &mut [f64]) {
    let mut xs = x.to_vec();
    let mut p = vec![0.0; d];
    let mut m = vec![0.0; d];
    for j in 0..d {
        let h = FD_REL * x[j].abs().max(1.0);
        let x0 = xs[j];
        xs[j] = x0 + h;
        f(t, &xs, &mut p);
        xs[j] = x0 - h;
        f(t, &xs, &mut m);
        xs[j] = x0;
        for i in 0..d {
            out[j * d + i] = (p[i] - m[i]) / (2.0 * h);
        }
    }
}

/// Residuals of the determining equations for an infinitesimal symmetry of
/// the generator `(𝔟, a)`:
///
/// `r1^i = [∂_t V^i + ∂_j V^i 𝔟^j + 1/2 ∂²_{jk} V^i a^{jk} - V̇⁰ 𝔟^i]
///         - [V⁰ ∂_t 𝔟^i + V^j ∂_j 𝔟^i]`
/// `r2^{jk} = [∂_i V^j a^{ik} + ∂_i V^k a^{ij} - V̇⁰ a^{jk}]
///            - [V⁰ ∂_t a^{jk} + V^i ∂_i a^{jk}]`
pub fn determining_residual(
    vf: &ProjectableVectorField,
    fields: &SdeFields,
    lattice: &SampleLattice,
) -> Result<DeterminingReport> {
    let d = fields.dim;
    if vf.dim != d {
        return Err(CoreError::Shape(
            "vector field and SDE dimensions disagree".into(),
        ));
    }
    let mut r1_sup = 0.0f64;
    let mut r2_sup = 0.0f64;
    let mut scale = 0.0f64;
    let mut x = vec![0.0; d];
    let mut samples = 0usize;

    let mut vt = vec![0.0; d];
    let mut vx = vec![0.0; d * d];
    let mut vxx = vec![0.0; d * d * d];
    let mut vval = vec![0.0; d];
    let mut bval = vec![0.0; d];
    let mut bt = vec![0.0; d];
    let mut bx = vec![0.0; d * d];

    for tk in 0..lattice.t_points {
        let t = lattice.time(tk);
        let v0 = (vf.v0)(t);
        let v0dot = vf.v0_dot(t);
        for c in 0..lattice.space_count() {
            lattice.coord(c, &mut x);
            samples += 1;

            vf.dt(t, &x, &mut vt);
            vf.dx(t, &x, &mut vx);
            vxx.fill(0.0);
            vf.dxx(t, &x, &mut vxx);
            vf.eval(t, &x, &mut vval);
            (fields.bfrak)(t, &x, &mut bval);
            field_dt(&fields.bfrak, t, &x, d, &mut bt);
            field_dx(&fields.bfrak, t, &x, d, &mut bx);
            let a = (fields.a)(t, &x);

            // time and space derivatives of a
            let ht = FD_REL * t.abs().max(1.0);
            let a_tp = (fields.a)(t + ht, &x);
            let a_tm = (fields.a)(t - ht, &x);
            let mut da_x: Vec<SymMat> = Vec::with_capacity(d);
            let mut xs = x.clone();
            for j in 0..d {
                let h = FD_REL * x[j].abs().max(1.0);
                let x0 = xs[j];
                xs[j] = x0 + h;
                let ap = (fields.a)(t, &xs);
                xs[j] = x0 - h;
                let am = (fields.a)(t, &xs);
                xs[j] = x0;
                let mut der = SymMat::zeros(d);
                for p in 0..d {
                    for q in p..d {
                        der.set(p, q, (ap.get(p, q) - am.get(p, q)) / (2.0 * h));
                    }
                }
                da_x.push(der);
            }

            for i in 0..d {
                let mut lhs = vt[i] - v0dot * bval[i];
                for j in 0..d {
                    lhs += vx[j * d + i] * bval[j];
                    for k in 0..d {
                        lhs += 0.5 * vxx[idx3(d, j, k, i)] * a.get(j, k);
                    }
                }
                let mut rhs = v0 * bt[i];
                for j in 0..d {
                    rhs += vval[j] * bx[j * d + i];
                }
                scale = scale.max(lhs.abs()).max(rhs.abs());
                r1_sup = r1_sup.max((lhs - rhs).abs());
            }
            for j in 0..d {
                for k in j..d {
                    let mut lhs = -v0dot * a.get(j, k);
                    for i in 0..d {
                        lhs += vx[i * d + j] * a.get(i, k) + vx[i * d + k] * a.get(i, j);
                    }
                    let da_t = (a_tp.get(j, k) - a_tm.get(j, k)) / (2.0 * ht);
                    let mut rhs = v0 * da_t;
                    for i in 0..d {
                        rhs += vval[i] * da_x[i].get(j, k);
                    }
                    scale = scale.max(lhs.abs()).max(rhs.abs());
                    r2_sup = r2_sup.max((lhs - rhs).abs());
                }
            }
        }
    }
    Ok(DeterminingReport {
        r1_sup,
        r2_sup,
        term_scale: scale,
        samples,
    })
}

/// Verdict of a symmetry check.
#[derive(Debug, Clone)]
pub struct Classification {
    pub is_symmetry: bool,
    pub report: DeterminingReport,
    pub tolerance_used: f64,
}

/// Classifies a field as a symmetry when both residual sup-norms are below
/// `tol` times the magnitude of the individual residual terms.
pub fn classify(
    vf: &ProjectableVectorField,
    fields: &SdeFields,
    lattice: &SampleLattice,
    tol: f64,
) -> Result<Classification> {
    let report = determining_residual(vf, fields, lattice)?;
    let threshold = tol * report.term_scale.max(f64::MIN_POSITIVE);
    Ok(Classification {
        is_symmetry: report.max_residual() <= threshold,
        report,
        tolerance_used: threshold,
    })
}

pub const DEFAULT_SYMMETRY_TOL: f64 = 1e-8;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{
        estimate_mean_derivatives, integrate_sde, DiffusionSpec, EvalGrid, InitialCondition,
        PathEnsemble, SimGrid,
    };
    use crate::fields::zero_vector;
    use std::sync::Arc;

    fn brownian_fields() -> SdeFields {
        SdeFields {
            bfrak: zero_vector(),
            a: Arc::new(|_t, _x| SymMat::identity(1)),
            dim: 1,
        }
    }

    fn scaling_field() -> ProjectableVectorField {
        // V = 2t ∂_t + x ∂_x with exact derivatives
        let mut f = ProjectableVectorField::new(
            1,
            Arc::new(|t| 2.0 * t),
            Arc::new(|_t, x: &[f64], out: &mut [f64]| out[0] = x[0]),
        );
        f.v0_dot_fn = Some(Arc::new(|_| 2.0));
        f.v_dt_fn = Some(crate::fields::zero_vector());
        f.v_jac_fn = Some(Arc::new(|_t, _x, out: &mut [f64]| out[0] = 1.0));
        f.v_hess_fn = Some(Arc::new(|_t, _x, out: &mut [f64]| out[0] = 0.0));
        f
    }

    #[test]
    fn prolong_time_translation_vanishes() {
        let vf = ProjectableVectorField::time_translation(1);
        let qx = SymMat::identity(1);
        let j = JetPoint {
            t: 0.7,
            x: &[0.3],
            dx: &[1.4],
            qx: &qx,
        };
        let (v1, v2) = prolong(&vf, &j);
        assert!(v1[0].abs() < 1e-9);
        assert!(v2.max_abs() < 1e-9);
    }

    #[test]
    fn prolong_scaling_hand_computed() {
        // V = 2t ∂_t + x ∂_x at (t, x, Dx=1, Qx=1): V1 = -1, V2 = 0
        let vf = scaling_field();
        let qx = SymMat::identity(1);
        let j = JetPoint {
            t: 0.5,
            x: &[0.2],
            dx: &[1.0],
            qx: &qx,
        };
        let (v1, v2) = prolong(&vf, &j);
        assert!((v1[0] + 1.0).abs() < 1e-8, "{}", v1[0]);
        assert!(v2.max_abs() < 1e-8);
    }

    #[test]
    fn prolong_dilation_hand_computed() {
        // V = x ∂_x: V1 = Dx, V2 = 2 Qx
        let vf = ProjectableVectorField::space_only(
            1,
            Arc::new(|_t, x: &[f64], out: &mut [f64]| out[0] = x[0]),
        );
        let qx = SymMat::diag(&[0.8]);
        let j = JetPoint {
            t: 0.0,
            x: &[0.4],
            dx: &[-0.6],
            qx: &qx,
        };
        let (v1, v2) = prolong(&vf, &j);
        assert!((v1[0] + 0.6).abs() < 1e-8);
        assert!((v2.get(0, 0) - 1.6).abs() < 1e-8);
    }

    #[test]
    fn prolong_nabla_flat_matches_prolong() {
        // flat model: V_∇ reduces to the V1 formula including the Hessian
        let vf = ProjectableVectorField::new(
            2,
            Arc::new(|t| 0.5 * t * t),
            Arc::new(|t, x: &[f64], out: &mut [f64]| {
                out[0] = x[0] * x[0] + t;
                out[1] = x[0] * x[1];
            }),
        );
        let model = ManifoldModel::euclidean(2);
        let mut qx = SymMat::identity(2);
        qx.set(0, 1, 0.2);
        let x = [0.3, -0.8];
        let dx = [0.9, 0.1];
        let j = JetPoint {
            t: 0.4,
            x: &x,
            dx: &dx,
            qx: &qx,
        };
        let (v1, _) = prolong(&vf, &j);
        let vn = prolong_nabla(&vf, &model, 0.4, &x, &dx, &qx).unwrap();
        for i in 0..2 {
            assert!((v1[i] - vn[i]).abs() < 1e-7, "{} vs {}", v1[i], vn[i]);
        }
    }

    #[test]
    fn prolong_nabla_killing_field_on_sphere() {
        // V̄ = ∂_φ is Killing on the round sphere: the Hessian+curvature
        // bracket vanishes, so V_∇ = D∇x^j ∂_j V̄ = 0 for constant components
        let vf = ProjectableVectorField::space_only(
            2,
            Arc::new(|_t, _x: &[f64], out: &mut [f64]| {
                out[0] = 0.0;
                out[1] = 1.0;
            }),
        );
        let model = ManifoldModel::sphere2();
        for theta in [0.6f64, 1.1, 2.2] {
            let x = [theta, 0.9];
            let qx = model.inverse_metric(&x).unwrap();
            let dnx = [0.2, -0.4];
            let vn = prolong_nabla(&vf, &model, 0.0, &x, &dnx, &qx).unwrap();
            assert!(vn[0].abs() < 1e-6, "theta {theta}: {vn:?}");
            assert!(vn[1].abs() < 1e-6, "theta {theta}: {vn:?}");
        }
    }

    #[test]
    fn prolong_zero_field_is_zero() {
        let vf = ProjectableVectorField::space_only(2, zero_vector());
        let model = ManifoldModel::sphere2();
        let x = [1.0, 0.5];
        let qx = model.inverse_metric(&x).unwrap();
        let vn = prolong_nabla(&vf, &model, 0.0, &x, &[0.1, 0.2], &qx).unwrap();
        assert!(vn.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn brownian_scaling_is_symmetry() {
        let fields = brownian_fields();
        let lattice = SampleLattice::line(-2.0, 2.0);
        let vf = scaling_field();
        let rep = determining_residual(&vf, &fields, &lattice).unwrap();
        assert!(rep.r1_sup < 1e-10, "r1 {}", rep.r1_sup);
        assert!(rep.r2_sup < 1e-10, "r2 {}", rep.r2_sup);
        let cls = classify(&vf, &fields, &lattice, DEFAULT_SYMMETRY_TOL).unwrap();
        assert!(cls.is_symmetry);
    }

    #[test]
    fn brownian_galilean_is_rejected() {
        // V = t ∂_x: r1 = ∂_t V = 1 everywhere
        let fields = brownian_fields();
        let lattice = SampleLattice::line(-2.0, 2.0);
        let mut vf = ProjectableVectorField::new(
            1,
            Arc::new(|_| 0.0),
            Arc::new(|t, _x: &[f64], out: &mut [f64]| out[0] = t),
        );
        vf.v0_dot_fn = Some(Arc::new(|_| 0.0));
        vf.v_dt_fn = Some(Arc::new(|_t, _x: &[f64], out: &mut [f64]| out[0] = 1.0));
        vf.v_jac_fn = Some(Arc::new(|_t, _x, out: &mut [f64]| out[0] = 0.0));
        vf.v_hess_fn = Some(Arc::new(|_t, _x, out: &mut [f64]| out[0] = 0.0));
        let rep = determining_residual(&vf, &fields, &lattice).unwrap();
        assert!((rep.r1_sup - 1.0).abs() < 1e-10, "r1 {}", rep.r1_sup);
        assert!(rep.r2_sup < 1e-10);
        let cls = classify(&vf, &fields, &lattice, DEFAULT_SYMMETRY_TOL).unwrap();
        assert!(!cls.is_symmetry);
    }

    #[test]
    fn ou_time_translation_is_symmetry() {
        let fields = SdeFields {
            bfrak: Arc::new(|_t, x: &[f64], out: &mut [f64]| out[0] = -x[0]),
            a: Arc::new(|_t, _x| SymMat::identity(1)),
            dim: 1,
        };
        let lattice = SampleLattice::line(-1.5, 1.5);
        let vf = ProjectableVectorField::time_translation(1);
        let cls = classify(&vf, &fields, &lattice, DEFAULT_SYMMETRY_TOL).unwrap();
        assert!(cls.is_symmetry, "report {:?}", cls.report);
    }

    #[test]
    fn residual_is_linear_in_the_field() {
        // residual(aV + bW) = a residual(V) + b residual(W) pointwise; on
        // sup norms we verify it for single-sample lattices
        let fields = SdeFields {
            bfrak: Arc::new(|_t, x: &[f64], out: &mut [f64]| out[0] = 0.3 * x[0]),
            a: Arc::new(|_t, x: &[f64]| SymMat::diag(&[1.0 + 0.1 * x[0] * x[0]])),
            dim: 1,
        };
        let mut lattice = SampleLattice::line(0.7, 0.7);
        lattice.points_per_dim = 1;
        lattice.t_points = 1;
        lattice.t_range = (0.4, 0.4);

        let mut v_field = ProjectableVectorField::new(
            1,
            Arc::new(|t| t),
            Arc::new(|_t, x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0]),
        );
        v_field.v0_dot_fn = Some(Arc::new(|_| 1.0));
        v_field.v_dt_fn = Some(crate::fields::zero_vector());
        v_field.v_jac_fn = Some(Arc::new(|_t, x: &[f64], out: &mut [f64]| out[0] = 2.0 * x[0]));
        v_field.v_hess_fn = Some(Arc::new(|_t, _x, out: &mut [f64]| out[0] = 2.0));
        let mut w_field = ProjectableVectorField::new(
            1,
            Arc::new(|_| 0.0),
            Arc::new(|t, x: &[f64], out: &mut [f64]| out[0] = t * x[0]),
        );
        w_field.v0_dot_fn = Some(Arc::new(|_| 0.0));
        w_field.v_dt_fn = Some(Arc::new(|_t, x: &[f64], out: &mut [f64]| out[0] = x[0]));
        w_field.v_jac_fn = Some(Arc::new(|t, _x: &[f64], out: &mut [f64]| out[0] = t));
        w_field.v_hess_fn = Some(Arc::new(|_t, _x, out: &mut [f64]| out[0] = 0.0));
        let (alpha, beta) = (2.0, -3.0);
        let mut combo = ProjectableVectorField::new(
            1,
            Arc::new(move |t| alpha * t),
            Arc::new(move |t, x: &[f64], out: &mut [f64]| {
                out[0] = alpha * x[0] * x[0] + beta * t * x[0];
            }),
        );
        combo.v0_dot_fn = Some(Arc::new(move |_| alpha));
        combo.v_dt_fn = Some(Arc::new(move |_t, x: &[f64], out: &mut [f64]| {
            out[0] = beta * x[0];
        }));
        combo.v_jac_fn = Some(Arc::new(move |t, x: &[f64], out: &mut [f64]| {
            out[0] = 2.0 * alpha * x[0] + beta * t;
        }));
        combo.v_hess_fn = Some(Arc::new(move |_t, _x, out: &mut [f64]| {
            out[0] = 2.0 * alpha;
        }));
        // signed residual at a single sample: recompute via the sup with
        // sign recovered from the scale of each piece; here both fields
        // have positive residuals at the sample, so linearity shows up in
        // the sup values directly
        let rv = determining_residual(&v_field, &fields, &lattice).unwrap();
        let rw = determining_residual(&w_field, &fields, &lattice).unwrap();
        let rc = determining_residual(&combo, &fields, &lattice).unwrap();
        // r1 for combo equals |alpha r1(V) ± beta r1(W)|; with the known
        // signs at this sample both r1's enter with the same sign pattern:
        // check against both sign choices to 1e-9
        let cand1 = (alpha * rv.r1_sup - beta * rw.r1_sup).abs();
        let cand2 = (alpha * rv.r1_sup + beta * rw.r1_sup).abs();
        assert!(
            (rc.r1_sup - cand1).abs() < 1e-12 || (rc.r1_sup - cand2).abs() < 1e-12,
            "combo {} vs {} / {}",
            rc.r1_sup,
            cand1,
            cand2
        );
    }

    #[test]
    fn flow_consistency_of_brownian_scaling() {
        // push a Brownian ensemble through the scaling flow
        // ψ_ε(t, x) = (e^{2ε} t, e^ε x) and re-estimate (D, Q): the image
        // must still look like Brownian motion (𝔟 = 0, a = 1)
        let spec = DiffusionSpec::brownian(Arc::new(ManifoldModel::euclidean(1)));
        let grid = SimGrid::new(0.0, 1e-2, 80);
        let n = 80_000;
        let ens = integrate_sde(&spec, &InitialCondition::Point(vec![0.0]), grid, n, 55).unwrap();
        for eps in [0.1f64, -0.1] {
            let lam_t = (2.0 * eps).exp();
            let lam_x = eps.exp();
            let times: Vec<f64> = ens.times.iter().map(|t| lam_t * t).collect();
            let paths: Vec<f64> = ens.paths.iter().map(|v| lam_x * v).collect();
            let pushed = PathEnsemble {
                model: ens.model.clone(),
                times,
                dim: 1,
                n_paths: n,
                paths,
                alive_until: ens.alive_until.clone(),
                seed: ens.seed,
                spec_digest: ens.spec_digest,
                killed_fraction: 0.0,
                quality_warning: false,
            };
            let eval = EvalGrid::line(-0.8 * lam_x, 0.8 * lam_x, 13);
            let field = estimate_mean_derivatives(&pushed, 60, &eval, None).unwrap();
            for c in 0..eval.len() {
                if field.masked[c] {
                    continue;
                }
                let se = field.se_dx_at(c)[0];
                assert!(
                    field.dx_at(c)[0].abs() <= 5.0 * se,
                    "eps {eps} cell {c}: D {} vs 5se {}",
                    field.dx_at(c)[0],
                    5.0 * se
                );
                assert!(
                    (field.qx[c].get(0, 0) - 1.0).abs() <= 0.05,
                    "eps {eps} cell {c}: Q {}",
                    field.qx[c].get(0, 0)
                );
            }
        }
    }
}
