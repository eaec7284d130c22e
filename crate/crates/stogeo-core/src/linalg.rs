//! Small dense linear algebra for chart dimensions d <= 3 and tridiagonal
//! systems for the grid solvers. Everything is `f64` and allocation-light.

use crate::error::{CoreError, Result};

/// Dense symmetric d x d matrix, stored row-major in full.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMat {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SymMat {
    pub fn zeros(dim: usize) -> Self {
        SymMat {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn from_rows(dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), dim * dim);
        SymMat { dim, data }
    }

    pub fn diag(entries: &[f64]) -> Self {
        let mut m = Self::zeros(entries.len());
        for (i, &v) in entries.iter().enumerate() {
            m.data[i * entries.len() + i] = v;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Sets both (i, j) and (j, i).
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    pub fn scale(&self, s: f64) -> Self {
        SymMat {
            dim: self.dim,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += self.data[i * d + j] * x[j];
            }
            out[i] = s;
        }
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let d = self.dim;
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += x[i] * self.data[i * d + j] * x[j];
            }
        }
        s
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn sym_residual(&self) -> f64 {
        let d = self.dim;
        let mut r = 0.0f64;
        for i in 0..d {
            for j in (i + 1)..d {
                r = r.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        r
    }

    /// Eigendecomposition by cyclic Jacobi rotations. Returns eigenvalues and
    /// the orthogonal matrix of eigenvectors (columns), so that
    /// `A = V diag(w) V^T`.
    pub fn jacobi_eigen(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let mut a = self.data.clone();
        let mut v = vec![0.0; d * d];
        for i in 0..d {
            v[i * d + i] = 1.0;
        }
        let idx = |i: usize, j: usize| i * d + j;
        for _sweep in 0..64 {
            let mut off = 0.0f64;
            for i in 0..d {
                for j in (i + 1)..d {
                    off += a[idx(i, j)] * a[idx(i, j)];
                }
            }
            if off.sqrt() < 1e-15 * (1.0 + self.max_abs()) {
                break;
            }
            for p in 0..d {
                for q in (p + 1)..d {
                    let apq = a[idx(p, q)];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let app = a[idx(p, p)];
                    let aqq = a[idx(q, q)];
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..d {
                        let akp = a[idx(k, p)];
                        let akq = a[idx(k, q)];
                        a[idx(k, p)] = c * akp - s * akq;
                        a[idx(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..d {
                        let apk = a[idx(p, k)];
                        let aqk = a[idx(q, k)];
                        a[idx(p, k)] = c * apk - s * aqk;
                        a[idx(q, k)] = s * apk + c * aqk;
                    }
                    for k in 0..d {
                        let vkp = v[idx(k, p)];
                        let vkq = v[idx(k, q)];
                        v[idx(k, p)] = c * vkp - s * vkq;
                        v[idx(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
        let w: Vec<f64> = (0..d).map(|i| a[idx(i, i)]).collect();
        (w, v)
    }

    /// Symmetric positive-definite square root: returns S with S S^T = self.
    pub fn spd_sqrt(&self) -> Result<SymMat> {
        let d = self.dim;
        let (w, v) = self.jacobi_eigen();
        let scale = self.max_abs().max(1.0);
        for &lam in &w {
            if lam <= -1e-12 * scale {
                return Err(CoreError::Numeric(format!(
                    "matrix is not positive semi-definite (eigenvalue {lam:.3e})"
                )));
            }
        }
        let mut out = SymMat::zeros(d);
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += v[i * d + k] * w[k].max(0.0).sqrt() * v[j * d + k];
                }
                out.data[i * d + j] = s;
            }
        }
        Ok(out)
    }

    /// Inverse of a symmetric positive-definite matrix.
    pub fn spd_inverse(&self) -> Result<SymMat> {
        let d = self.dim;
        let (w, v) = self.jacobi_eigen();
        let scale = self.max_abs().max(1.0);
        for &lam in &w {
            if lam <= 1e-14 * scale {
                return Err(CoreError::Numeric(format!(
                    "singular metric (eigenvalue {lam:.3e})"
                )));
            }
        }
        let mut out = SymMat::zeros(d);
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += v[i * d + k] / w[k] * v[j * d + k];
                }
                out.data[i * d + j] = s;
            }
        }
        Ok(out)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let (w, _) = self.jacobi_eigen();
        w.into_iter().fold(f64::INFINITY, f64::min)
    }
}

/// Solves a tridiagonal system in place (Thomas algorithm).
/// `sub[i]` multiplies x[i-1] in row i, `diag[i]` multiplies x[i],
/// `sup[i]` multiplies x[i+1]; `rhs` is overwritten with the solution.
pub fn solve_tridiag(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &mut [f64]) -> Result<()> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut dpr = vec![0.0; n];
    if diag[0] == 0.0 {
        return Err(CoreError::Numeric("tridiagonal pivot is zero".into()));
    }
    c[0] = sup[0] / diag[0];
    dpr[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - sub[i] * c[i - 1];
        if m == 0.0 {
            return Err(CoreError::Numeric("tridiagonal pivot is zero".into()));
        }
        c[i] = sup[i] / m;
        dpr[i] = (rhs[i] - sub[i] * dpr[i - 1]) / m;
    }
    rhs[n - 1] = dpr[n - 1];
    for i in (0..n - 1).rev() {
        rhs[i] = dpr[i] - c[i] * rhs[i + 1];
    }
    Ok(())
}

/// Solves a cyclic tridiagonal system (periodic boundary) via the
/// Sherman-Morrison correction. `corner_low` is the (0, n-1) entry and
/// `corner_high` the (n-1, 0) entry.
pub fn solve_cyclic_tridiag(
    sub: &[f64],
    diag: &[f64],
    sup: &[f64],
    corner_low: f64,
    corner_high: f64,
    rhs: &mut [f64],
) -> Result<()> {
    let n = diag.len();
    if n < 3 {
        return Err(CoreError::Shape("cyclic tridiagonal needs n >= 3".into()));
    }
    let gamma = -diag[0];
    let mut dmod: Vec<f64> = diag.to_vec();
    dmod[0] -= gamma;
    dmod[n - 1] -= corner_low * corner_high / gamma;

    let mut x = rhs.to_vec();
    solve_tridiag(sub, &dmod, sup, &mut x)?;

    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = corner_high;
    solve_tridiag(sub, &dmod, sup, &mut u)?;

    // v = (1, 0, ..., 0, corner_low / gamma)
    let vx = x[0] + corner_low / gamma * x[n - 1];
    let vu = u[0] + corner_low / gamma * u[n - 1];
    let factor = vx / (1.0 + vu);
    for i in 0..n {
        rhs[i] = x[i] - factor * u[i];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_recovers_diagonal() {
        let m = SymMat::diag(&[3.0, 1.0, 2.0]);
        let (mut w, _) = m.jacobi_eigen();
        w.sort_by(f64::total_cmp);
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!((w[1] - 2.0).abs() < 1e-12);
        assert!((w[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn spd_sqrt_reconstructs() {
        let mut m = SymMat::zeros(2);
        m.set(0, 0, 2.0);
        m.set(1, 1, 3.0);
        m.set(0, 1, 0.5);
        let s = m.spd_sqrt().unwrap();
        // S S^T == m
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += s.get(i, k) * s.get(j, k);
                }
                assert!((acc - m.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spd_inverse_2x2() {
        let mut m = SymMat::zeros(2);
        m.set(0, 0, 4.0);
        m.set(1, 1, 2.0);
        m.set(0, 1, 1.0);
        let inv = m.spd_inverse().unwrap();
        // m * inv == I
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += m.get(i, k) * inv.get(k, j);
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((acc - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tridiag_solves_poisson_row() {
        let n = 8;
        let sub = vec![-1.0; n];
        let diag = vec![2.5; n];
        let sup = vec![-1.0; n];
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            rhs[i] = 2.5 * x_true[i];
            if i > 0 {
                rhs[i] -= x_true[i - 1];
            }
            if i + 1 < n {
                rhs[i] -= x_true[i + 1];
            }
        }
        solve_tridiag(&sub, &diag, &sup, &mut rhs).unwrap();
        for i in 0..n {
            assert!((rhs[i] - x_true[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn cyclic_tridiag_matches_dense() {
        let n = 6;
        let sub = vec![-0.3; n];
        let diag = vec![2.0; n];
        let sup = vec![-0.4; n];
        let (cl, ch) = (-0.4, -0.3);
        let x_true: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.91).cos()).collect();
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            rhs[i] = diag[i] * x_true[i]
                + sub[i] * x_true[(i + n - 1) % n]
                + sup[i] * x_true[(i + 1) % n];
        }
        // corners replace the wrapped sub/sup contributions in rows 0, n-1
        rhs[0] += (cl - sub[0]) * x_true[n - 1];
        rhs[n - 1] += (ch - sup[n - 1]) * x_true[0];
        solve_cyclic_tridiag(&sub, &diag, &sup, cl, ch, &mut rhs).unwrap();
        for i in 0..n {
            assert!((rhs[i] - x_true[i]).abs() < 1e-11, "i={i} {} {}", rhs[i], x_true[i]);
        }
    }
}
