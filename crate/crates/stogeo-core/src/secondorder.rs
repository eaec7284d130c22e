//! Second-order tangent and cotangent data: the coefficient pairs of
//! diffusion generators and their dual momenta/diffusivities, the second
//! differential and symmetric product, canonical lifts of classical
//! Hamiltonians, Legendre transforms and energies.
//!
//! Conventions: a second-order vector stores `(first, second) = (𝔟, a)` so
//! that the associated operator is `𝔟^i ∂_i + 1/2 a^{jk} ∂_j ∂_k`; a
//! second-order covector stores the full coordinate Hessian in `o` (no 1/2
//! weighting), and pairings carry the factor explicitly.

use crate::error::{CoreError, Result};
use crate::fields::{ScalarField, VectorField};
use crate::geometry::{idx3, ManifoldModel};
use crate::linalg::SymMat;
use crate::pde::GridFunction;
use std::sync::Arc;

/// Generator coefficients `(𝔟, a)` of a diffusion.
#[derive(Debug, Clone)]
pub struct SecondOrderVector {
    pub first: Vec<f64>,
    pub second: SymMat,
}

impl SecondOrderVector {
    pub fn new(first: Vec<f64>, second: SymMat) -> Result<Self> {
        if first.len() != second.dim {
            return Err(CoreError::Shape(
                "first/second dimensions disagree".into(),
            ));
        }
        if second.sym_residual() > 1e-12 {
            return Err(CoreError::Shape("second part must be symmetric".into()));
        }
        Ok(SecondOrderVector { first, second })
    }

    /// Checks positive semi-definiteness of the quadratic part.
    pub fn is_elliptic(&self) -> bool {
        self.second.min_eigenvalue() >= -1e-12 * self.second.max_abs().max(1.0)
    }
}

/// Momentum plus conjugate diffusivities `(p, o)`.
#[derive(Debug, Clone)]
pub struct SecondOrderCovector {
    pub p: Vec<f64>,
    pub o: SymMat,
}

impl SecondOrderCovector {
    /// Pairing with a second-order vector: `p_i 𝔟^i + 1/2 o_{jk} a^{jk}`.
    pub fn pair(&self, v: &SecondOrderVector) -> f64 {
        let d = self.p.len();
        let mut s = 0.0;
        for i in 0..d {
            s += self.p[i] * v.first[i];
        }
        for j in 0..d {
            for k in 0..d {
                s += 0.5 * self.o.get(j, k) * v.second.get(j, k);
            }
        }
        s
    }

    /// Tensorial conjugate diffusivities `o^∇_{jk} = o_{jk} - Γ^i_{jk} p_i`.
    pub fn tensorial_o(&self, model: &ManifoldModel, x: &[f64]) -> Result<SymMat> {
        let d = self.p.len();
        let gamma = model.christoffel(x)?;
        let mut out = SymMat::zeros(d);
        for j in 0..d {
            for k in j..d {
                let mut v = self.o.get(j, k);
                for i in 0..d {
                    v -= gamma[idx3(d, i, j, k)] * self.p[i];
                }
                out.set(j, k, v);
            }
        }
        Ok(out)
    }
}

/// Fiber-linear projection to tangent vectors:
/// `b^i = 𝔟^i + 1/2 a^{jk} Γ^i_{jk}(x)`.
pub fn rho_nabla(model: &ManifoldModel, x: &[f64], v: &SecondOrderVector) -> Result<Vec<f64>> {
    let d = model.dim();
    if v.first.len() != d {
        return Err(CoreError::Shape(format!(
            "second-order vector has dimension {}, model needs {d}",
            v.first.len()
        )));
    }
    let gamma = model.christoffel(x)?;
    let mut out = v.first.clone();
    for i in 0..d {
        let mut corr = 0.0;
        for j in 0..d {
            for k in 0..d {
                corr += v.second.get(j, k) * gamma[idx3(d, i, j, k)];
            }
        }
        out[i] += 0.5 * corr;
    }
    Ok(out)
}

/// Auxiliary diffusivities `ô_{jk}(x, p) = Γ^i_{jk}(x) p_i`.
pub fn o_hat(model: &ManifoldModel, x: &[f64], p: &[f64]) -> Result<SymMat> {
    let d = model.dim();
    let gamma = model.christoffel(x)?;
    let mut out = SymMat::zeros(d);
    for j in 0..d {
        for k in j..d {
            let mut v = 0.0;
            for i in 0..d {
                v += gamma[idx3(d, i, j, k)] * p[i];
            }
            out.set(j, k, v);
        }
    }
    Ok(out)
}

/// Second differential of a scalar function: `(∂_i f, ∂_j ∂_k f)` by
/// fourth-order central differences.
pub fn d2f(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<SecondOrderCovector> {
    let d = x.len();
    let mut p = vec![0.0; d];
    let mut o = SymMat::zeros(d);
    let mut xs = x.to_vec();
    let eval1 = |xs: &mut Vec<f64>, i: usize, off: f64| -> f64 {
        let x0 = xs[i];
        xs[i] = x0 + off;
        let v = f(xs);
        xs[i] = x0;
        v
    };
    for i in 0..d {
        let fm2 = eval1(&mut xs, i, -2.0 * h);
        let fm1 = eval1(&mut xs, i, -h);
        let fp1 = eval1(&mut xs, i, h);
        let fp2 = eval1(&mut xs, i, 2.0 * h);
        p[i] = (-fp2 + 8.0 * fp1 - 8.0 * fm1 + fm2) / (12.0 * h);
        let f0 = f(&xs);
        o.set(
            i,
            i,
            (-fp2 + 16.0 * fp1 - 30.0 * f0 + 16.0 * fm1 - fm2) / (12.0 * h * h),
        );
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let mut eval2 = |oi: f64, oj: f64| -> f64 {
                let (xi, xj) = (xs[i], xs[j]);
                xs[i] = xi + oi;
                xs[j] = xj + oj;
                let v = f(&xs);
                xs[i] = xi;
                xs[j] = xj;
                v
            };
            let v = (eval2(h, h) - eval2(h, -h) - eval2(-h, h) + eval2(-h, -h)) / (4.0 * h * h);
            o.set(i, j, v);
        }
    }
    if p.iter().any(|v| !v.is_finite()) || o.data.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numeric("non-finite derivative in d2f".into()));
    }
    Ok(SecondOrderCovector { p, o })
}

/// Symmetric product of two covectors under the symmetric convention:
/// `o_{jk} = 1/2 (ω_j η_k + ω_k η_j)`.
pub fn symmetric_product(omega: &[f64], eta: &[f64]) -> Result<SymMat> {
    if omega.len() != eta.len() {
        return Err(CoreError::Shape("covector dimensions disagree".into()));
    }
    let d = omega.len();
    let mut out = SymMat::zeros(d);
    for j in 0..d {
        for k in j..d {
            out.set(j, k, 0.5 * (omega[j] * eta[k] + omega[k] * eta[j]));
        }
    }
    Ok(out)
}

/// Coordinate-change rule for generator coefficients: given the Jacobian
/// `J^i_j = ∂x̃^i/∂x^j` and map Hessian `H^i_{jk} = ∂²x̃^i/∂x^j∂x^k`,
/// returns `(J 𝔟 + 1/2 H : a, J a J^T)`.
pub fn transform_second_order_vector(
    jac: &[f64],
    hess: &[f64],
    v: &SecondOrderVector,
) -> SecondOrderVector {
    let d = v.first.len();
    let mut first = vec![0.0; d];
    for i in 0..d {
        let mut s = 0.0;
        for j in 0..d {
            s += jac[i * d + j] * v.first[j];
            for k in 0..d {
                s += 0.5 * hess[idx3(d, i, j, k)] * v.second.get(j, k);
            }
        }
        first[i] = s;
    }
    let mut second = SymMat::zeros(d);
    for i in 0..d {
        for j in i..d {
            let mut s = 0.0;
            for k in 0..d {
                for l in 0..d {
                    s += jac[i * d + k] * v.second.get(k, l) * jac[j * d + l];
                }
            }
            second.set(i, j, s);
        }
    }
    SecondOrderVector { first, second }
}

/// Classical Hamiltonian on the cotangent bundle.
#[derive(Clone)]
pub enum ClassicalHamiltonian {
    /// `H0 = 1/2 g^{ij} p_i p_j + b^i p_i + F`, the family behind every
    /// closed-form transform in the crate.
    Quadratic {
        model: Arc<ManifoldModel>,
        b: VectorField,
        f: ScalarField,
    },
    /// Arbitrary callback; gradients by central differences.
    Custom {
        dim: usize,
        eval: Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>,
    },
}

const GRAD_H: f64 = 1e-6;

impl ClassicalHamiltonian {
    pub fn free(model: Arc<ManifoldModel>) -> Self {
        ClassicalHamiltonian::Quadratic {
            model,
            b: crate::fields::zero_vector(),
            f: crate::fields::zero_scalar(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ClassicalHamiltonian::Quadratic { model, .. } => model.dim(),
            ClassicalHamiltonian::Custom { dim, .. } => *dim,
        }
    }

    pub fn eval(&self, t: f64, x: &[f64], p: &[f64]) -> f64 {
        match self {
            ClassicalHamiltonian::Quadratic { model, b, f } => {
                let d = model.dim();
                let ginv = model.inverse_metric(x).expect("metric in chart");
                let mut bv = vec![0.0; d];
                b(t, x, &mut bv);
                let mut s = f(t, x);
                for i in 0..d {
                    s += bv[i] * p[i];
                    for j in 0..d {
                        s += 0.5 * ginv.get(i, j) * p[i] * p[j];
                    }
                }
                s
            }
            ClassicalHamiltonian::Custom { eval, .. } => eval(t, x, p),
        }
    }

    /// `∂H0/∂p` (the fiber derivative toward velocities).
    pub fn grad_p(&self, t: f64, x: &[f64], p: &[f64], out: &mut [f64]) {
        match self {
            ClassicalHamiltonian::Quadratic { model, b, .. } => {
                let ginv = model.inverse_metric(x).expect("metric in chart");
                ginv.matvec(p, out);
                let d = model.dim();
                let mut bv = vec![0.0; d];
                b(t, x, &mut bv);
                for i in 0..d {
                    out[i] += bv[i];
                }
            }
            ClassicalHamiltonian::Custom { eval, .. } => {
                let mut ps = p.to_vec();
                for (i, o) in out.iter_mut().enumerate() {
                    let p0 = ps[i];
                    ps[i] = p0 + GRAD_H;
                    let hp = eval(t, x, &ps);
                    ps[i] = p0 - GRAD_H;
                    let hm = eval(t, x, &ps);
                    ps[i] = p0;
                    *o = (hp - hm) / (2.0 * GRAD_H);
                }
            }
        }
    }

    /// `∂H0/∂x` at fixed p (coordinate partials, by differences).
    pub fn grad_x(&self, t: f64, x: &[f64], p: &[f64], out: &mut [f64]) {
        let mut xs = x.to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            let x0 = xs[i];
            xs[i] = x0 + GRAD_H;
            let hp = self.eval(t, &xs, p);
            xs[i] = x0 - GRAD_H;
            let hm = self.eval(t, &xs, p);
            xs[i] = x0;
            *o = (hp - hm) / (2.0 * GRAD_H);
        }
    }
}

/// Classical Lagrangian on the tangent bundle.
#[derive(Clone)]
pub enum Lagrangian {
    /// `L0 = 1/2 |ẋ - b|_g^2 - F`.
    Quadratic {
        model: Arc<ManifoldModel>,
        b: VectorField,
        f: ScalarField,
    },
    Custom {
        dim: usize,
        eval: Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>,
    },
}

impl Lagrangian {
    pub fn free(model: Arc<ManifoldModel>) -> Self {
        Lagrangian::Quadratic {
            model,
            b: crate::fields::zero_vector(),
            f: crate::fields::zero_scalar(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Lagrangian::Quadratic { model, .. } => model.dim(),
            Lagrangian::Custom { dim, .. } => *dim,
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, Lagrangian::Quadratic { .. })
    }

    pub fn eval(&self, t: f64, x: &[f64], xdot: &[f64]) -> f64 {
        match self {
            Lagrangian::Quadratic { model, b, f } => {
                let d = model.dim();
                let g = model.metric(x);
                let mut bv = vec![0.0; d];
                b(t, x, &mut bv);
                let rel: Vec<f64> = (0..d).map(|i| xdot[i] - bv[i]).collect();
                0.5 * g.quad_form(&rel) - f(t, x)
            }
            Lagrangian::Custom { eval, .. } => eval(t, x, xdot),
        }
    }

    /// Fiber derivative `p = ∂L0/∂ẋ`.
    pub fn d_xdot(&self, t: f64, x: &[f64], xdot: &[f64], out: &mut [f64]) {
        match self {
            Lagrangian::Quadratic { model, b, .. } => {
                let d = model.dim();
                let g = model.metric(x);
                let mut bv = vec![0.0; d];
                b(t, x, &mut bv);
                let rel: Vec<f64> = (0..d).map(|i| xdot[i] - bv[i]).collect();
                g.matvec(&rel, out);
            }
            Lagrangian::Custom { eval, .. } => {
                let mut vs = xdot.to_vec();
                for (i, o) in out.iter_mut().enumerate() {
                    let v0 = vs[i];
                    vs[i] = v0 + GRAD_H;
                    let lp = eval(t, x, &vs);
                    vs[i] = v0 - GRAD_H;
                    let lm = eval(t, x, &vs);
                    vs[i] = v0;
                    *o = (lp - lm) / (2.0 * GRAD_H);
                }
            }
        }
    }
}

/// `p = ∂L0/∂ẋ` and `H0 = p·ẋ - L0` at the given fiber point.
pub fn legendre(l0: &Lagrangian, t: f64, x: &[f64], xdot: &[f64]) -> Result<(Vec<f64>, f64)> {
    let d = l0.dim();
    let mut p = vec![0.0; d];
    l0.d_xdot(t, x, xdot, &mut p);
    let mut h = -l0.eval(t, x, xdot);
    for i in 0..d {
        h += p[i] * xdot[i];
    }
    if !h.is_finite() {
        return Err(CoreError::Numeric("Legendre transform not finite".into()));
    }
    Ok((p, h))
}

/// Inverse transform: solves `∂L0/∂ẋ = p` for the velocity and returns
/// `(ẋ, L0)`. Closed form for the quadratic family, damped Newton with
/// backtracking otherwise (initial guess ẋ = p).
pub fn legendre_inverse(
    l0: &Lagrangian,
    t: f64,
    x: &[f64],
    p: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let d = l0.dim();
    match l0 {
        Lagrangian::Quadratic { model, b, .. } => {
            let ginv = model.inverse_metric(x)?;
            let mut xdot = vec![0.0; d];
            ginv.matvec(p, &mut xdot);
            let mut bv = vec![0.0; d];
            b(t, x, &mut bv);
            for i in 0..d {
                xdot[i] += bv[i];
            }
            let l = l0.eval(t, x, &xdot);
            Ok((xdot, l))
        }
        Lagrangian::Custom { .. } => {
            let mut xdot = p.to_vec();
            let mut fval = vec![0.0; d];
            let residual = |v: &[f64], fval: &mut Vec<f64>| -> f64 {
                l0.d_xdot(t, x, v, fval);
                let mut n = 0.0f64;
                for i in 0..d {
                    fval[i] -= p[i];
                    n = n.max(fval[i].abs());
                }
                n
            };
            let mut norm = residual(&xdot, &mut fval);
            for _ in 0..50 {
                if norm < 1e-12 {
                    let l = l0.eval(t, x, &xdot);
                    return Ok((xdot, l));
                }
                // Jacobian of the fiber derivative by differences
                let mut jac = SymMat::zeros(d);
                let mut vs = xdot.clone();
                let mut col = vec![0.0; d];
                for j in 0..d {
                    let v0 = vs[j];
                    vs[j] = v0 + GRAD_H;
                    l0.d_xdot(t, x, &vs, &mut col);
                    let cp = col.clone();
                    vs[j] = v0 - GRAD_H;
                    l0.d_xdot(t, x, &vs, &mut col);
                    vs[j] = v0;
                    for i in 0..d {
                        jac.data[i * d + j] = (cp[i] - col[i]) / (2.0 * GRAD_H);
                    }
                }
                let inv = jac
                    .spd_inverse()
                    .map_err(|_| CoreError::Convergence("singular fiber Hessian".into()))?;
                let mut step = vec![0.0; d];
                inv.matvec(&fval, &mut step);
                let mut alpha = 1.0;
                loop {
                    let trial: Vec<f64> = (0..d).map(|i| xdot[i] - alpha * step[i]).collect();
                    let n_trial = residual(&trial, &mut fval);
                    if n_trial < norm || alpha < 1e-6 {
                        xdot = trial;
                        norm = n_trial;
                        break;
                    }
                    alpha *= 0.5;
                }
            }
            if norm < 1e-10 {
                let l = l0.eval(t, x, &xdot);
                Ok((xdot, l))
            } else {
                Err(CoreError::Convergence(format!(
                    "inverse Legendre Newton stalled at residual {norm:.3e}"
                )))
            }
        }
    }
}

/// Second-order Hamiltonian as the canonical lift of a classical one:
/// `H̄(x, p, o, t) = H0(x, p, t) + epsilon/2 g^{jk}(x)(o_{jk} - Γ^i_{jk}(x) p_i)`.
#[derive(Clone)]
pub struct SecondOrderHamiltonian {
    pub base: ClassicalHamiltonian,
    pub model: Arc<ManifoldModel>,
    pub epsilon: f64,
}

/// Builds the canonical lift with diffusivity `epsilon`.
pub fn canonical_lift(
    base: ClassicalHamiltonian,
    model: Arc<ManifoldModel>,
    epsilon: f64,
) -> Result<SecondOrderHamiltonian> {
    if !(epsilon > 0.0) {
        return Err(CoreError::Precondition(
            "diffusivity epsilon must be positive".into(),
        ));
    }
    Ok(SecondOrderHamiltonian {
        base,
        model,
        epsilon,
    })
}

impl SecondOrderHamiltonian {
    pub fn eval(&self, t: f64, x: &[f64], p: &[f64], o: &SymMat) -> f64 {
        let d = self.model.dim();
        let ginv = self.model.inverse_metric(x).expect("metric in chart");
        let gamma = self.model.christoffel(x).expect("chart point");
        let mut s = self.base.eval(t, x, p);
        for j in 0..d {
            for k in 0..d {
                let mut onab = o.get(j, k);
                for i in 0..d {
                    onab -= gamma[idx3(d, i, j, k)] * p[i];
                }
                s += 0.5 * self.epsilon * ginv.get(j, k) * onab;
            }
        }
        s
    }

    /// `∂H̄/∂o_{jk} = epsilon/2 g^{jk}(x)`, exposed analytically.
    pub fn do_partial(&self, x: &[f64]) -> Result<SymMat> {
        Ok(self.model.inverse_metric(x)?.scale(0.5 * self.epsilon))
    }

    /// Quadratic coefficient of the induced MDE system:
    /// `QX = 2 ∂H̄/∂o = epsilon g^{-1}`.
    pub fn qx(&self, x: &[f64]) -> Result<SymMat> {
        Ok(self.model.inverse_metric(x)?.scale(self.epsilon))
    }
}

/// Classical and generalized energy. `E0 = ẋ·∂_ẋ L0 - L0` and
/// `E = E0 + 1/2 Δ_g S(t, x)` with the Laplace-Beltrami of `S` taken by
/// finite differences on its grid.
pub fn energies(
    l0: &Lagrangian,
    s: &GridFunction,
    model: &ManifoldModel,
    t: f64,
    x: &[f64],
    xdot: &[f64],
) -> Result<(f64, f64)> {
    let d = l0.dim();
    for (k, axis) in s.grid.axes.iter().enumerate() {
        if !axis.periodic && (x[k] < axis.min || x[k] > axis.max) {
            return Err(CoreError::Domain(format!(
                "point {x:?} outside the grid of S"
            )));
        }
    }
    let mut p = vec![0.0; d];
    l0.d_xdot(t, x, xdot, &mut p);
    let mut e0 = -l0.eval(t, x, xdot);
    for i in 0..d {
        e0 += p[i] * xdot[i];
    }
    let lap = laplace_beltrami(s, model, x)?;
    Ok((e0, e0 + 0.5 * lap))
}

/// `Δ_g S = g^{jk} (∂_j ∂_k S - Γ^i_{jk} ∂_i S)` interpolated from nodewise
/// finite differences.
pub fn laplace_beltrami(s: &GridFunction, model: &ManifoldModel, x: &[f64]) -> Result<f64> {
    let d = s.grid.dim();
    let mut vals = vec![0.0; s.grid.node_count()];
    let mut xn = vec![0.0; d];
    let mut grad = vec![0.0; d];
    for (idx, val) in vals.iter_mut().enumerate() {
        if !s.grid.is_interior(idx) {
            continue;
        }
        s.grid.node_coord(idx, &mut xn);
        if !model.contains(&xn) {
            continue;
        }
        let hess = s.node_hessian(idx);
        s.node_gradient(idx, &mut grad);
        let ginv = model.inverse_metric(&xn)?;
        let gamma = model.christoffel(&xn)?;
        let mut lap = 0.0;
        for j in 0..d {
            for k in 0..d {
                let mut v = hess.get(j, k);
                for i in 0..d {
                    v -= gamma[idx3(d, i, j, k)] * grad[i];
                }
                lap += ginv.get(j, k) * v;
            }
        }
        *val = lap;
    }
    let lap_field = GridFunction {
        grid: s.grid.clone(),
        values: vals,
    };
    Ok(lap_field.eval(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::constant_scalar;
    use crate::pde::SpaceGrid;
    use crate::rng::{uniform, Stream};
    use std::f64::consts::PI;

    fn unit(seed_slot: u64, i: u64) -> f64 {
        uniform(99, Stream::Generic(seed_slot), i, 0, 0)
    }

    #[test]
    fn rho_nabla_euclidean_passthrough() {
        let m = ManifoldModel::euclidean(2);
        let v = SecondOrderVector::new(vec![1.5, -0.3], SymMat::diag(&[2.0, 0.7])).unwrap();
        let b = rho_nabla(&m, &[0.1, 0.2], &v).unwrap();
        assert_eq!(b, vec![1.5, -0.3]);
    }

    #[test]
    fn rho_nabla_sphere_inverse_metric() {
        // 𝔟 = 0, a = g^{-1}: b^θ = -1/2 cot θ, b^φ = 0
        let m = ManifoldModel::sphere2();
        let theta = 1.1f64;
        let x = [theta, 0.4];
        let a = m.inverse_metric(&x).unwrap();
        let v = SecondOrderVector::new(vec![0.0, 0.0], a).unwrap();
        let b = rho_nabla(&m, &x, &v).unwrap();
        assert!((b[0] - (-0.5 * theta.cos() / theta.sin())).abs() < 1e-13);
        assert!(b[1].abs() < 1e-13);
    }

    #[test]
    fn rho_nabla_tangent_fixed() {
        let m = ManifoldModel::sphere2();
        let v = SecondOrderVector::new(vec![0.3, -0.9], SymMat::zeros(2)).unwrap();
        let b = rho_nabla(&m, &[1.0, 2.0], &v).unwrap();
        assert_eq!(b, vec![0.3, -0.9]);
    }

    #[test]
    fn d2f_examples() {
        let sq = |x: &[f64]| x[0] * x[0];
        let c = d2f(&sq, &[3.0], 1e-3).unwrap();
        assert!((c.p[0] - 6.0).abs() < 1e-9);
        assert!((c.o.get(0, 0) - 2.0).abs() < 1e-7);

        let konst = |_x: &[f64]| 7.5;
        let c = d2f(&konst, &[1.0, 2.0], 1e-3).unwrap();
        assert!(c.p.iter().all(|v| v.abs() < 1e-12));
        assert!(c.o.max_abs() < 1e-8);

        let xy = |x: &[f64]| x[0] * x[1];
        let c = d2f(&xy, &[1.0, 2.0], 1e-3).unwrap();
        assert!((c.p[0] - 2.0).abs() < 1e-9);
        assert!((c.p[1] - 1.0).abs() < 1e-9);
        assert!(c.o.get(0, 0).abs() < 1e-7);
        assert!((c.o.get(0, 1) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn symmetric_product_examples() {
        let o = symmetric_product(&[1.0], &[1.0]).unwrap();
        assert_eq!(o.get(0, 0), 1.0);

        let o = symmetric_product(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(o.get(0, 0), 0.0);
        assert_eq!(o.get(0, 1), 0.5);
        assert_eq!(o.get(1, 1), 0.0);

        let o = symmetric_product(&[0.0, 0.0], &[3.0, -1.0]).unwrap();
        assert_eq!(o.max_abs(), 0.0);
    }

    #[test]
    fn canonical_lift_matches_quadratic_expansion() {
        // H̄ for the quadratic family must equal
        // 1/2 g^{ij} p_i p_j + b^i p_i - 1/2 g^{ij} Γ^k_{ij} p_k
        //   + 1/2 g^{ij} o_{ij} + F on the sphere
        let model = Arc::new(ManifoldModel::sphere2());
        let b: VectorField = Arc::new(|_t, x: &[f64], out: &mut [f64]| {
            out[0] = 0.3 * x[1].sin();
            out[1] = -0.2 * x[0];
        });
        let f: ScalarField = Arc::new(|_t, x: &[f64]| 0.7 * x[0].cos());
        let h0 = ClassicalHamiltonian::Quadratic {
            model: model.clone(),
            b: b.clone(),
            f: f.clone(),
        };
        let lifted = canonical_lift(h0, model.clone(), 1.0).unwrap();
        for s in 0..25u64 {
            let x = [0.5 + 2.0 * unit(1, s), 6.0 * unit(2, s)];
            let p = [2.0 * unit(3, s) - 1.0, 2.0 * unit(4, s) - 1.0];
            let mut o = SymMat::zeros(2);
            o.set(0, 0, 2.0 * unit(5, s) - 1.0);
            o.set(1, 1, 2.0 * unit(6, s) - 1.0);
            o.set(0, 1, 2.0 * unit(7, s) - 1.0);
            let got = lifted.eval(0.0, &x, &p, &o);

            let ginv = model.inverse_metric(&x).unwrap();
            let gamma = model.christoffel(&x).unwrap();
            let mut bv = [0.0, 0.0];
            b(0.0, &x, &mut bv);
            let mut expect = f(0.0, &x);
            for i in 0..2 {
                expect += bv[i] * p[i];
                for j in 0..2 {
                    expect += 0.5 * ginv.get(i, j) * p[i] * p[j]
                        + 0.5 * ginv.get(i, j) * o.get(i, j);
                    for k in 0..2 {
                        expect -= 0.5 * ginv.get(i, j) * gamma[idx3(2, k, i, j)] * p[k];
                    }
                }
            }
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn canonical_lift_euclidean_trace_form() {
        // flat H0 = 1/2 |p|^2 + F, epsilon = ħ: H̄ = 1/2 |p|^2 + ħ/2 tr o + F
        let model = Arc::new(ManifoldModel::euclidean(2));
        let hbar = 0.37;
        let h0 = ClassicalHamiltonian::Quadratic {
            model: model.clone(),
            b: crate::fields::zero_vector(),
            f: constant_scalar(1.23),
        };
        let lifted = canonical_lift(h0, model, hbar).unwrap();
        let p = [0.4, -0.6];
        let mut o = SymMat::zeros(2);
        o.set(0, 0, 0.5);
        o.set(1, 1, -0.2);
        o.set(0, 1, 0.9);
        let got = lifted.eval(0.0, &[0.0, 0.0], &p, &o);
        let expect = 0.5 * (p[0] * p[0] + p[1] * p[1]) + 0.5 * hbar * (0.5 - 0.2) + 1.23;
        assert!((got - expect).abs() < 1e-14);
    }

    #[test]
    fn canonical_lift_reduces_at_o_hat() {
        // H̄(x, p, ô(x, p)) = H0(x, p) exactly
        let model = Arc::new(ManifoldModel::sphere2());
        let h0 = ClassicalHamiltonian::Quadratic {
            model: model.clone(),
            b: crate::fields::zero_vector(),
            f: Arc::new(|_t, x: &[f64]| x[0] * 0.4),
        };
        let lifted = canonical_lift(h0.clone(), model.clone(), 2.5).unwrap();
        for s in 0..20u64 {
            let x = [0.5 + 2.0 * unit(8, s), 6.0 * unit(9, s)];
            let p = [2.0 * unit(10, s) - 1.0, 2.0 * unit(11, s) - 1.0];
            let ohat = o_hat(&model, &x, &p).unwrap();
            let got = lifted.eval(0.0, &x, &p, &ohat);
            let expect = h0.eval(0.0, &x, &p);
            assert!((got - expect).abs() < 1e-13);
        }
    }

    #[test]
    fn legendre_flat_quadratic_closed_form() {
        // L0 = 1/2 |ẋ - b|^2 - F  ->  p = ẋ - b, H0 = 1/2|p|^2 + <b,p> + F
        let model = Arc::new(ManifoldModel::euclidean(1));
        let bval = 0.8;
        let fval = -0.25;
        let l0 = Lagrangian::Quadratic {
            model,
            b: Arc::new(move |_t, _x: &[f64], out: &mut [f64]| out[0] = bval),
            f: constant_scalar(fval),
        };
        let xdot = [1.7];
        let (p, h) = legendre(&l0, 0.0, &[0.0], &xdot).unwrap();
        assert!((p[0] - (xdot[0] - bval)).abs() < 1e-14);
        let expect_h = 0.5 * p[0] * p[0] + bval * p[0] + fval;
        assert!((h - expect_h).abs() < 1e-14);

        // free case: p = v, H0 = v^2/2
        let free = Lagrangian::free(Arc::new(ManifoldModel::euclidean(1)));
        let (p, h) = legendre(&free, 0.0, &[0.0], &[2.0]).unwrap();
        assert_eq!(p[0], 2.0);
        assert_eq!(h, 2.0);
    }

    #[test]
    fn legendre_round_trip_quadratic() {
        let model = Arc::new(ManifoldModel::euclidean(2));
        let l0 = Lagrangian::Quadratic {
            model,
            b: Arc::new(|_t, x: &[f64], out: &mut [f64]| {
                out[0] = 0.3 * x[1];
                out[1] = -0.1 * x[0];
            }),
            f: Arc::new(|_t, x: &[f64]| 0.5 * (x[0] * x[0] + x[1] * x[1])),
        };
        for s in 0..30u64 {
            let x = [2.0 * unit(12, s) - 1.0, 2.0 * unit(13, s) - 1.0];
            let v = [4.0 * unit(14, s) - 2.0, 4.0 * unit(15, s) - 2.0];
            let (p, h) = legendre(&l0, 0.3, &x, &v).unwrap();
            let (v_back, l_back) = legendre_inverse(&l0, 0.3, &x, &p).unwrap();
            assert!((v_back[0] - v[0]).abs() < 1e-10);
            assert!((v_back[1] - v[1]).abs() < 1e-10);
            // consistency of the pair: H0 + L0 = p·ẋ
            let pair = p[0] * v[0] + p[1] * v[1];
            assert!((h + l_back - pair).abs() < 1e-10);
        }
    }

    #[test]
    fn legendre_inverse_newton_on_quartic() {
        // L = 1/4 |ẋ|^4 + 1/2 |ẋ|^2 is strictly convex; p = (|ẋ|^2 + 1) ẋ
        let l0 = Lagrangian::Custom {
            dim: 2,
            eval: Arc::new(|_t, _x: &[f64], v: &[f64]| {
                let q = v[0] * v[0] + v[1] * v[1];
                0.25 * q * q + 0.5 * q
            }),
        };
        let v_true = [0.7, -0.4];
        let q = v_true[0] * v_true[0] + v_true[1] * v_true[1];
        let p = [(q + 1.0) * v_true[0], (q + 1.0) * v_true[1]];
        let (v, _) = legendre_inverse(&l0, 0.0, &[0.0, 0.0], &p).unwrap();
        assert!((v[0] - v_true[0]).abs() < 1e-6, "{v:?}");
        assert!((v[1] - v_true[1]).abs() < 1e-6);
    }

    #[test]
    fn energies_examples() {
        let model = Arc::new(ManifoldModel::euclidean(1));
        let grid = SpaceGrid::line(-2.0, 2.0, 64);

        let bval = 0.6;
        let l0 = Lagrangian::Quadratic {
            model: model.clone(),
            b: Arc::new(move |_t, _x: &[f64], out: &mut [f64]| out[0] = bval),
            f: constant_scalar(0.9),
        };
        // S linear: ΔS = 0 so E = E0
        let s_lin = GridFunction::from_fn(&grid, |x| 3.0 * x[0]);
        let xdot = [1.4];
        let (e0, e) = energies(&l0, &s_lin, &model, 0.0, &[0.3], &xdot).unwrap();
        let rel = xdot[0] - bval;
        let expect_e0 = 0.5 * rel * rel + rel * bval + 0.9;
        assert!((e0 - expect_e0).abs() < 1e-12);
        assert!((e - e0).abs() < 1e-9);

        // free particle with ẋ = 2: E0 = 2
        let free = Lagrangian::free(model.clone());
        let (e0, _) = energies(&free, &s_lin, &model, 0.0, &[0.0], &[2.0]).unwrap();
        assert!((e0 - 2.0).abs() < 1e-12);

        // quadratic S: E - E0 = 1/2 ΔS
        let s_quad = GridFunction::from_fn(&grid, |x| 0.7 * x[0] * x[0]);
        let (e0, e) = energies(&free, &s_quad, &model, 0.0, &[0.3], &[2.0]).unwrap();
        assert!((e - e0 - 0.7).abs() < 1e-9);

        assert!(energies(&free, &s_lin, &model, 0.0, &[5.0], &[1.0]).is_err());
    }

    #[test]
    fn pairing_carries_half_on_second_part() {
        let alpha = SecondOrderCovector {
            p: vec![2.0],
            o: SymMat::diag(&[4.0]),
        };
        let v = SecondOrderVector::new(vec![3.0], SymMat::diag(&[5.0])).unwrap();
        // p 𝔟 + 1/2 o a = 6 + 10
        assert_eq!(alpha.pair(&v), 16.0);

        let onab = alpha
            .tensorial_o(&ManifoldModel::euclidean(1), &[0.0])
            .unwrap();
        assert_eq!(onab.get(0, 0), 4.0);
    }

    #[test]
    fn coordinate_change_consistency_affine() {
        // Transforming (𝔟, a) by the second-order rule and projecting with
        // the pulled-back metric's symbols must match transforming the
        // projection as a vector, for random conformal (rotation + scale)
        // affine maps where the conformal class is preserved.
        let d = 2usize;
        for s in 0..10u64 {
            let scale = 0.8 + 0.4 * unit(24, s);
            let angle = unit(25, s) * PI;
            let rot = [
                scale * angle.cos(),
                -scale * angle.sin(),
                scale * angle.sin(),
                scale * angle.cos(),
            ];
            let rot_inv = {
                let det = rot[0] * rot[3] - rot[1] * rot[2];
                [rot[3] / det, -rot[1] / det, -rot[2] / det, rot[0] / det]
            };

            let model = ManifoldModel::conformal(
                2,
                "base",
                Arc::new(|x: &[f64]| 0.3 * (x[0] + 0.7 * x[1]).sin()),
            );
            // pullback metric in tilde coordinates: with x = R^{-1} y,
            // g̃ = e^{2φ(x)} / scale^2 * I, still conformal
            let model_tilde = ManifoldModel::conformal(
                2,
                "tilde",
                Arc::new(move |y: &[f64]| {
                    let x = [
                        rot_inv[0] * y[0] + rot_inv[1] * y[1],
                        rot_inv[2] * y[0] + rot_inv[3] * y[1],
                    ];
                    0.3 * (x[0] + 0.7 * x[1]).sin() - scale.ln()
                }),
            );

            let x = [0.4 * unit(26, s), 0.4 * unit(27, s)];
            let y = [rot[0] * x[0] + rot[1] * x[1], rot[2] * x[0] + rot[3] * x[1]];
            let mut sec = SymMat::zeros(d);
            sec.set(0, 0, 1.0 + unit(28, s));
            sec.set(1, 1, 1.0 + unit(29, s));
            sec.set(0, 1, 0.3 * unit(30, s));
            let v = SecondOrderVector::new(vec![unit(31, s) - 0.5, unit(32, s) - 0.5], sec)
                .unwrap();

            // route 1: project then push forward as a vector
            let b = rho_nabla(&model, &x, &v).unwrap();
            let b_pushed = [rot[0] * b[0] + rot[1] * b[1], rot[2] * b[0] + rot[3] * b[1]];
            // route 2: transform (𝔟, a) and project in the new chart
            let hess = vec![0.0; d * d * d];
            let v_tilde = transform_second_order_vector(&rot, &hess, &v);
            let b_tilde = rho_nabla(&model_tilde, &y, &v_tilde).unwrap();

            assert!(
                (b_tilde[0] - b_pushed[0]).abs() < 1e-10
                    && (b_tilde[1] - b_pushed[1]).abs() < 1e-10,
                "sample {s}: {b_tilde:?} vs {b_pushed:?}"
            );
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(SecondOrderVector::new(vec![1.0], SymMat::zeros(2)).is_err());
        assert!(symmetric_product(&[1.0], &[1.0, 2.0]).is_err());
        let m = ManifoldModel::euclidean(2);
        let v = SecondOrderVector::new(vec![1.0], SymMat::zeros(1)).unwrap();
        assert!(rho_nabla(&m, &[0.0, 0.0], &v).is_err());
        assert!(canonical_lift(
            ClassicalHamiltonian::free(Arc::new(ManifoldModel::euclidean(1))),
            Arc::new(ManifoldModel::euclidean(1)),
            0.0
        )
        .is_err());
        assert!(
            SecondOrderVector::new(vec![0.0], SymMat::diag(&[1.0]))
                .unwrap()
                .is_elliptic()
        );
    }
}
