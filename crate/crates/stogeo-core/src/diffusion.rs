//! Itô SDE integration on manifold charts and Monte Carlo estimation of
//! mean derivatives.
//!
//! The integrator steps the chart equation with the connection-corrected
//! drift `𝔟^i = b^i - 1/2 Γ^i_{jk} a^{jk}`, so the tangent drift stored in
//! a [`DiffusionSpec`] is the geometric drift `b` of the MDE system
//! `D_∇X = b`, `QX = a`. Noise is addressed by `(seed, path, step)`
//! counters, which makes ensembles bit-identical for any thread count.

use crate::error::{CoreError, Result};
use crate::fields::{MatrixField, VectorField};
use crate::geometry::{idx3, ManifoldModel};
use crate::linalg::SymMat;
use crate::rng::{self, Stream};
use rayon::prelude::*;
use std::io::Write;
use std::sync::Arc;

/// Diffusion tensor `a = σ σ*` of a spec.
#[derive(Clone)]
pub enum DiffusionCoeff {
    /// `a = scale * g^{-1}` (the Riemannian default; `QX = ǧ` at scale 1).
    InverseMetric { scale: f64 },
    /// Constant coefficient matrix.
    Constant(SymMat),
    /// General symmetric PSD field.
    Field(MatrixField),
}

/// Generator data `(b, a)` over a model: drift is the tangent vector field
/// of the MDE form, diffusion the squared-noise tensor.
#[derive(Clone)]
pub struct DiffusionSpec {
    pub model: Arc<ManifoldModel>,
    pub drift: VectorField,
    pub diffusion: DiffusionCoeff,
    /// Human-readable tag hashed into ensemble digests.
    pub label: String,
}

impl DiffusionSpec {
    pub fn brownian(model: Arc<ManifoldModel>) -> Self {
        DiffusionSpec {
            model,
            drift: crate::fields::zero_vector(),
            diffusion: DiffusionCoeff::InverseMetric { scale: 1.0 },
            label: "brownian".into(),
        }
    }

    pub fn diffusion_at(&self, t: f64, x: &[f64]) -> Result<SymMat> {
        match &self.diffusion {
            DiffusionCoeff::InverseMetric { scale } => {
                Ok(self.model.inverse_metric(x)?.scale(*scale))
            }
            DiffusionCoeff::Constant(m) => Ok(m.clone()),
            DiffusionCoeff::Field(f) => Ok(f(t, x)),
        }
    }

    /// SPD square root `σ` with `σ σ^T = a(t, x)`.
    pub fn sigma_at(&self, t: f64, x: &[f64]) -> Result<SymMat> {
        match &self.diffusion {
            DiffusionCoeff::InverseMetric { scale } => {
                Ok(self.model.metric_sqrt(x)?.scale(scale.sqrt()))
            }
            DiffusionCoeff::Constant(m) => m.spd_sqrt(),
            DiffusionCoeff::Field(f) => f(t, x).spd_sqrt(),
        }
    }

    /// Chart drift of the Itô equation: `𝔟 = b - 1/2 Γ : a`.
    pub fn modified_drift(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.model.dim();
        (self.drift)(t, x, out);
        if !self.model.is_flat() {
            let gamma = self.model.christoffel(x)?;
            let a = self.diffusion_at(t, x)?;
            for i in 0..d {
                let mut corr = 0.0;
                for j in 0..d {
                    for k in 0..d {
                        corr += gamma[idx3(d, i, j, k)] * a.get(j, k);
                    }
                }
                out[i] -= 0.5 * corr;
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> u64 {
        rng::fnv1a(format!("{}:{}", self.model.name(), self.label).as_bytes())
    }
}

/// Initial condition for an ensemble; sampling is addressed by path index.
#[derive(Clone)]
pub enum InitialCondition {
    Point(Vec<f64>),
    /// Isotropic Gaussian around a center (used for endpoint surrogates).
    Gaussian { center: Vec<f64>, std: f64 },
    /// Custom deterministic sampler `(seed, path) -> point`.
    Sampler(Arc<dyn Fn(u64, u64) -> Vec<f64> + Send + Sync>),
}

impl InitialCondition {
    fn sample(&self, seed: u64, path: u64, out: &mut [f64]) {
        match self {
            InitialCondition::Point(p) => out.copy_from_slice(p),
            InitialCondition::Gaussian { center, std } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = center[i]
                        + std * rng::normal(seed, Stream::InitialCondition, path, 0, i as u64);
                }
            }
            InitialCondition::Sampler(f) => out.copy_from_slice(&f(seed, path)),
        }
    }
}

/// Uniform time grid for path simulation.
#[derive(Debug, Clone, Copy)]
pub struct SimGrid {
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
}

impl SimGrid {
    pub fn new(t0: f64, dt: f64, steps: usize) -> Self {
        assert!(dt > 0.0 && steps >= 1);
        SimGrid { t0, dt, steps }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.t0 + k as f64 * self.dt).collect()
    }
}

/// N sampled trajectories on a common grid with RNG provenance.
pub struct PathEnsemble {
    pub model: Arc<ManifoldModel>,
    pub times: Vec<f64>,
    pub dim: usize,
    pub n_paths: usize,
    /// Row-major `[path][step][coordinate]`.
    pub paths: Vec<f64>,
    /// Number of valid time indices per path; a path killed while computing
    /// step k keeps its last valid point frozen from index k on.
    pub alive_until: Vec<u32>,
    pub seed: u64,
    pub spec_digest: u64,
    /// Fraction of paths stopped at the chart boundary.
    pub killed_fraction: f64,
    /// Set when more than half of the paths were killed.
    pub quality_warning: bool,
}

impl PathEnsemble {
    #[inline]
    pub fn point(&self, path: usize, step: usize) -> &[f64] {
        let stride = (self.times.len()) * self.dim;
        let base = path * stride + step * self.dim;
        &self.paths[base..base + self.dim]
    }

    #[inline]
    pub fn is_alive(&self, path: usize, step: usize) -> bool {
        (step as u32) < self.alive_until[path]
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Flat binary layout: magic, version, N, K, d, seed, then the
    /// row-major coordinates and the alive table.
    pub fn write_binary(&self, w: &mut dyn Write) -> std::io::Result<()> {
        w.write_all(b"SGEN")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.n_paths as u64).to_le_bytes())?;
        w.write_all(&(self.steps() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for t in &self.times {
            w.write_all(&t.to_le_bytes())?;
        }
        for v in &self.paths {
            w.write_all(&v.to_le_bytes())?;
        }
        for a in &self.alive_until {
            w.write_all(&a.to_le_bytes())?;
        }
        Ok(())
    }

    /// CSV rows `path,step,t,x0,...,x{d-1},alive`.
    pub fn write_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        write!(w, "path,step,t")?;
        for i in 0..self.dim {
            write!(w, ",x{i}")?;
        }
        writeln!(w, ",alive")?;
        for n in 0..self.n_paths {
            for k in 0..self.times.len() {
                write!(w, "{},{},{:.16e}", n, k, self.times[k])?;
                for v in self.point(n, k) {
                    write!(w, ",{v:.16e}")?;
                }
                writeln!(w, ",{}", u8::from(self.is_alive(n, k)))?;
            }
        }
        Ok(())
    }
}

/// Euler-Maruyama integration of the chart SDE with the modified drift.
/// Paths that leave the chart domain are stopped and flagged.
pub fn integrate_sde(
    spec: &DiffusionSpec,
    init: &InitialCondition,
    grid: SimGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(CoreError::Precondition("need at least one path".into()));
    }
    let model = spec.model.clone();
    let d = model.dim();
    let times = grid.times();
    let k_steps = grid.steps;
    let stride = (k_steps + 1) * d;

    // validate the initial condition for point starts
    if let InitialCondition::Point(p) = init {
        if !model.contains(p) {
            return Err(CoreError::Domain(format!(
                "initial point {p:?} outside chart domain"
            )));
        }
    }

    let mut paths = vec![0.0; n_paths * stride];
    let mut alive_until = vec![0u32; n_paths];

    // constant noise factor whenever the coefficient cannot vary in space
    let fixed_sigma: Option<SymMat> = match &spec.diffusion {
        DiffusionCoeff::Constant(m) => Some(m.spd_sqrt()?),
        DiffusionCoeff::InverseMetric { scale } if model.is_flat() => {
            Some(SymMat::identity(d).scale(scale.sqrt()))
        }
        _ => None,
    };

    paths
        .par_chunks_mut(stride)
        .zip(alive_until.par_iter_mut())
        .enumerate()
        .for_each(|(n, (row, alive))| {
            let n64 = n as u64;
            let mut x = vec![0.0; d];
            init.sample(seed, n64, &mut x);
            model.wrap(&mut x);
            let mut ok = model.contains(&x);
            row[0..d].copy_from_slice(&x);
            let mut last_alive = if ok { 1u32 } else { 0 };
            let mut drift = vec![0.0; d];
            let mut noise = vec![0.0; d];
            let sqrt_dt = grid.dt.sqrt();
            for k in 0..k_steps {
                if ok {
                    let t = times[k];
                    if spec.modified_drift(t, &x, &mut drift).is_err() {
                        ok = false;
                    } else {
                        let step = |sigma: &SymMat, x: &mut Vec<f64>, noise: &mut Vec<f64>| {
                            for (i, nz) in noise.iter_mut().enumerate() {
                                *nz = rng::normal(
                                    seed,
                                    Stream::PathNoise,
                                    n64,
                                    k as u64,
                                    i as u64,
                                );
                            }
                            for i in 0..d {
                                let mut dx = drift[i] * grid.dt;
                                for j in 0..d {
                                    dx += sigma.get(i, j) * sqrt_dt * noise[j];
                                }
                                x[i] += dx;
                            }
                        };
                        match &fixed_sigma {
                            Some(sigma) => step(sigma, &mut x, &mut noise),
                            None => match spec.sigma_at(t, &x) {
                                Ok(sigma) => step(&sigma, &mut x, &mut noise),
                                Err(_) => ok = false,
                            },
                        }
                        if ok {
                            model.wrap(&mut x);
                            if model.contains(&x) {
                                last_alive = (k + 2) as u32;
                            } else {
                                ok = false;
                            }
                        }
                    }
                }
                // frozen at the last valid point once killed
                let dst = (k + 1) * d;
                if ok {
                    row[dst..dst + d].copy_from_slice(&x);
                } else {
                    let srcb = (last_alive.max(1) as usize - 1) * d;
                    for i in 0..d {
                        row[dst + i] = row[srcb + i];
                    }
                }
            }
            *alive = last_alive;
        });

    let killed = alive_until
        .iter()
        .filter(|&&a| (a as usize) < k_steps + 1)
        .count();
    let killed_fraction = killed as f64 / n_paths as f64;
    Ok(PathEnsemble {
        model,
        times,
        dim: d,
        n_paths,
        paths,
        alive_until,
        seed,
        spec_digest: spec.digest(),
        killed_fraction,
        quality_warning: killed_fraction > 0.5,
    })
}

/// Rectangular lattice of evaluation points for kernel estimators.
#[derive(Debug, Clone)]
pub struct EvalGrid {
    /// Per dimension: (min, max, number of points).
    pub axes: Vec<(f64, f64, usize)>,
}

impl EvalGrid {
    pub fn line(min: f64, max: f64, n: usize) -> Self {
        EvalGrid {
            axes: vec![(min, max, n)],
        }
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.2).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coord(&self, idx: usize, out: &mut [f64]) {
        let mut rem = idx;
        for (k, &(min, max, n)) in self.axes.iter().enumerate().rev() {
            let i = rem % n;
            rem /= n;
            out[k] = if n == 1 {
                0.5 * (min + max)
            } else {
                min + (max - min) * i as f64 / (n - 1) as f64
            };
        }
    }
}

/// Kernel-regression estimates of `(DX, QX, D_∇X)` on an evaluation grid.
pub struct MeanDerivativeField {
    pub eval: EvalGrid,
    pub dim: usize,
    pub dx: Vec<f64>,
    pub qx: Vec<SymMat>,
    pub dnx: Vec<f64>,
    pub ess: Vec<f64>,
    pub masked: Vec<bool>,
    pub se_dx: Vec<f64>,
    pub bandwidth: Vec<f64>,
}

impl MeanDerivativeField {
    pub fn dx_at(&self, cell: usize) -> &[f64] {
        &self.dx[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn dnx_at(&self, cell: usize) -> &[f64] {
        &self.dnx[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn se_dx_at(&self, cell: usize) -> &[f64] {
        &self.se_dx[cell * self.dim..(cell + 1) * self.dim]
    }
}

/// Minimum effective sample size before a cell is masked.
pub const MIN_CELL_ESS: f64 = 30.0;

/// Nadaraya-Watson regression of path increments at time index `t_index`:
/// `DX(x) ≈ Σ w_n (X_n(t+Δt) - X_n(t)) / Δt` with Gaussian product kernels,
/// `QX` likewise with outer products, and `D_∇X = DX + 1/2 Γ : QX` exactly.
pub fn estimate_mean_derivatives(
    ens: &PathEnsemble,
    t_index: usize,
    eval: &EvalGrid,
    bandwidth: Option<Vec<f64>>,
) -> Result<MeanDerivativeField> {
    let d = ens.dim;
    if t_index + 1 >= ens.times.len() {
        return Err(CoreError::Precondition(
            "need t and t+dt inside the ensemble grid".into(),
        ));
    }
    let dt = ens.times[t_index + 1] - ens.times[t_index];
    let cells = eval.len();

    // usable paths at this window
    let usable: Vec<usize> = (0..ens.n_paths)
        .filter(|&n| ens.is_alive(n, t_index + 1))
        .collect();
    if usable.len() < 2 {
        return Err(CoreError::Estimation(
            "not enough alive paths for estimation".into(),
        ));
    }

    let h = match bandwidth {
        Some(h) => {
            if h.len() != d || h.iter().any(|v| !(*v > 0.0)) {
                return Err(CoreError::Precondition("bandwidth must be positive".into()));
            }
            h
        }
        None => silverman_bandwidth(ens, t_index, &usable),
    };

    // per-cell accumulators: sw, sw2, sw*inc (d), sw*inc2 (d) for SE,
    // sw*outer (d*d)
    let acc_len = 2 + 2 * d + d * d;
    let block = 8192usize;
    let partials: Vec<Vec<f64>> = usable
        .par_chunks(block)
        .map(|chunk| {
            let mut acc = vec![0.0; cells * acc_len];
            let mut xc = vec![0.0; d];
            let mut delta = vec![0.0; d];
            let mut inc = vec![0.0; d];
            for &n in chunk {
                let x0 = ens.point(n, t_index);
                let x1 = ens.point(n, t_index + 1);
                ens.model.coord_delta(x1, x0, &mut inc);
                for c in 0..cells {
                    eval.coord(c, &mut xc);
                    ens.model.coord_delta(x0, &xc, &mut delta);
                    let mut arg = 0.0;
                    for i in 0..d {
                        let z = delta[i] / h[i];
                        arg += z * z;
                    }
                    if arg > 40.0 {
                        continue;
                    }
                    let w = (-0.5 * arg).exp();
                    let a = &mut acc[c * acc_len..(c + 1) * acc_len];
                    a[0] += w;
                    a[1] += w * w;
                    for i in 0..d {
                        let z = inc[i] / dt;
                        a[2 + i] += w * z;
                        a[2 + d + i] += w * z * z;
                        for j in 0..d {
                            a[2 + 2 * d + i * d + j] += w * inc[i] * inc[j] / dt;
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let mut acc = vec![0.0; cells * acc_len];
    for p in &partials {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }

    let mut dx = vec![0.0; cells * d];
    let mut se_dx = vec![0.0; cells * d];
    let mut qx = Vec::with_capacity(cells);
    let mut dnx = vec![0.0; cells * d];
    let mut ess = vec![0.0; cells];
    let mut masked = vec![false; cells];
    let mut xc = vec![0.0; d];
    let mut any_live = false;
    for c in 0..cells {
        let a = &acc[c * acc_len..(c + 1) * acc_len];
        let sw = a[0];
        let e = if a[1] > 0.0 { sw * sw / a[1] } else { 0.0 };
        ess[c] = e;
        let mut q = SymMat::zeros(d);
        if e < MIN_CELL_ESS || sw <= 0.0 {
            masked[c] = true;
            qx.push(q);
            continue;
        }
        any_live = true;
        for i in 0..d {
            let mean = a[2 + i] / sw;
            dx[c * d + i] = mean;
            let second = a[2 + d + i] / sw;
            let var = (second - mean * mean).max(0.0);
            se_dx[c * d + i] = (var / e).sqrt();
            for j in i..d {
                q.set(i, j, 0.5 * (a[2 + 2 * d + i * d + j] + a[2 + 2 * d + j * d + i]) / sw);
            }
        }
        // exact identity D_∇X = DX + 1/2 Γ : QX
        eval.coord(c, &mut xc);
        let gamma = ens.model.christoffel(&xc)?;
        for i in 0..d {
            let mut corr = 0.0;
            for j in 0..d {
                for k in 0..d {
                    corr += gamma[idx3(d, i, j, k)] * q.get(j, k);
                }
            }
            dnx[c * d + i] = dx[c * d + i] + 0.5 * corr;
        }
        qx.push(q);
    }
    if !any_live {
        return Err(CoreError::Estimation(
            "every evaluation cell is below the effective-sample-size floor".into(),
        ));
    }
    Ok(MeanDerivativeField {
        eval: eval.clone(),
        dim: d,
        dx,
        qx,
        dnx,
        ess,
        masked,
        se_dx,
        bandwidth: h,
    })
}

/// Per-dimension Silverman rule `1.06 std N^{-1/5}`.
fn silverman_bandwidth(ens: &PathEnsemble, t_index: usize, usable: &[usize]) -> Vec<f64> {
    let d = ens.dim;
    let n = usable.len() as f64;
    let mut h = vec![0.0; d];
    for (i, hi) in h.iter_mut().enumerate() {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for &p in usable {
            let v = ens.point(p, t_index)[i];
            s1 += v;
            s2 += v * v;
        }
        let mean = s1 / n;
        let var = (s2 / n - mean * mean).max(1e-300);
        *hi = (1.06 * var.sqrt() * n.powf(-0.2)).max(1e-12);
    }
    h
}

/// Sup-norm mismatch between estimated mean derivatives and a spec's own
/// generator fields, over unmasked cells.
pub struct GeneratorResidual {
    pub dx_sup: f64,
    pub qx_sup: f64,
    /// Largest ratio |DX - 𝔟| / SE over unmasked cells.
    pub dx_sigma_ratio: f64,
    pub live_cells: usize,
    pub min_ess: f64,
}

pub fn generator_residual(
    ens: &PathEnsemble,
    spec: &DiffusionSpec,
    t_index: usize,
    eval: &EvalGrid,
) -> Result<GeneratorResidual> {
    let field = estimate_mean_derivatives(ens, t_index, eval, None)?;
    let d = ens.dim;
    let t = ens.times[t_index];
    let mut xc = vec![0.0; d];
    let mut bfrak = vec![0.0; d];
    let mut dx_sup = 0.0f64;
    let mut qx_sup = 0.0f64;
    let mut ratio = 0.0f64;
    let mut live = 0usize;
    let mut min_ess = f64::INFINITY;
    for c in 0..eval.len() {
        if field.masked[c] {
            continue;
        }
        live += 1;
        min_ess = min_ess.min(field.ess[c]);
        field.eval.coord(c, &mut xc);
        spec.modified_drift(t, &xc, &mut bfrak)?;
        let a = spec.diffusion_at(t, &xc)?;
        for i in 0..d {
            let diff = (field.dx_at(c)[i] - bfrak[i]).abs();
            dx_sup = dx_sup.max(diff);
            let se = field.se_dx_at(c)[i].max(1e-300);
            ratio = ratio.max(diff / se);
            for j in 0..d {
                qx_sup = qx_sup.max((field.qx[c].get(i, j) - a.get(i, j)).abs());
            }
        }
    }
    if live == 0 {
        return Err(CoreError::Estimation("no live cells in residual".into()));
    }
    Ok(GeneratorResidual {
        dx_sup,
        qx_sup,
        dx_sigma_ratio: ratio,
        live_cells: live,
        min_ess,
    })
}
