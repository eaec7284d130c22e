//! Assembly of the dynamical laws: Bernstein bridges through the log
//! transform, the Maxwell-closed stochastic Hamilton system, Newton-type and
//! Euler-Lagrange residuals, action functionals, Noether charges, energy
//! conservation and canonical-transformation checks.
//!
//! The p-transport PDE is never solved directly: S is obtained from the
//! linear backward equation for u and differentiated, and `(p, o) = d²S`
//! closes the system through the second-order Maxwell relations.

use crate::diffusion::{
    integrate_sde, DiffusionCoeff, DiffusionSpec, EvalGrid, InitialCondition, PathEnsemble,
    SimGrid,
};
use crate::error::{CoreError, Result};
use crate::fields::{ScalarField, VectorField};
use crate::geometry::ManifoldModel;
use crate::linalg::SymMat;
use crate::pde::{
    hjb_from_u, hjb_residual, solve_backward, solve_forward, BackwardProblem, GridFunction,
    SpaceGrid, TimeField, TimeGrid,
};
use crate::secondorder::{ClassicalHamiltonian, Lagrangian, SecondOrderHamiltonian};
use rayon::prelude::*;
use std::sync::Arc;

/// Fields `p(t, x)` and `o(t, x)` closed by the second-order Maxwell
/// relations; built from a principal function S as `(∇S, ∇²S)`.
pub struct HorizontalField {
    pub grid: Arc<SpaceGrid>,
    pub tgrid: TimeGrid,
    pub dim: usize,
    /// One time field per momentum component.
    pub p: Vec<TimeField>,
    /// Upper-triangle components of o, row-major over `(i, j)` with i <= j.
    pub o: Vec<TimeField>,
    /// The source S when the field was built from a principal function.
    pub s: Option<TimeField>,
}

fn tri_index(d: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * d - i * (i + 1) / 2 + j
}

impl HorizontalField {
    /// Builds `(p, o) = (∇S, ∇²S)` nodewise from a principal function.
    pub fn from_principal_function(s: TimeField) -> Self {
        let grid = s.grid.clone();
        let tgrid = s.tgrid;
        let d = grid.dim();
        let nodes = grid.node_count();
        let levels = s.slices.len();
        let mut p_slices = vec![vec![vec![0.0; nodes]; levels]; d];
        let mut o_slices = vec![vec![vec![0.0; nodes]; levels]; d * (d + 1) / 2];
        let mut grad = vec![0.0; d];
        for (k, slice) in s.slices.iter().enumerate() {
            let gf = GridFunction {
                grid: grid.clone(),
                values: slice.clone(),
            };
            for idx in 0..nodes {
                gf.node_gradient(idx, &mut grad);
                for i in 0..d {
                    p_slices[i][k][idx] = grad[i];
                }
                let hess = gf.node_hessian(idx);
                for i in 0..d {
                    for j in i..d {
                        o_slices[tri_index(d, i, j)][k][idx] = hess.get(i, j);
                    }
                }
            }
        }
        let mk = |slices: Vec<Vec<f64>>| TimeField {
            grid: grid.clone(),
            tgrid,
            slices,
        };
        HorizontalField {
            grid: grid.clone(),
            tgrid,
            dim: d,
            p: p_slices.into_iter().map(mk).collect(),
            o: o_slices.into_iter().map(mk).collect(),
            s: Some(s),
        }
    }

    pub fn p_at(&self, t: f64, x: &[f64], out: &mut [f64]) {
        for (i, f) in self.p.iter().enumerate() {
            out[i] = f.eval(t, x);
        }
    }

    pub fn o_at(&self, t: f64, x: &[f64]) -> SymMat {
        let d = self.dim;
        let mut o = SymMat::zeros(d);
        for i in 0..d {
            for j in i..d {
                o.set(i, j, self.o[tri_index(d, i, j)].eval(t, x));
            }
        }
        o
    }

    /// Sup of `|o_{ij} - ∂_j p_i|` over interior nodes (optionally within a
    /// region); the Maxwell-relation consistency of the stored fields. Near
    /// barely resolved terminal spikes the raw differences disagree by
    /// construction, so pipeline prechecks pass the region they evaluate on.
    pub fn maxwell_residual(&self, region: Option<&dyn Fn(f64, &[f64]) -> bool>) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        let mut grad = vec![0.0; d];
        let mut x = vec![0.0; d];
        for k in 0..self.p[0].slices.len() {
            let t = self.tgrid.time(k);
            for i in 0..d {
                let gf = GridFunction {
                    grid: self.grid.clone(),
                    values: self.p[i].slices[k].clone(),
                };
                for idx in 0..self.grid.node_count() {
                    if !self.grid.is_interior(idx) {
                        continue;
                    }
                    self.grid.node_coord(idx, &mut x);
                    if let Some(mask) = region {
                        if !mask(t, &x) {
                            continue;
                        }
                    }
                    gf.node_gradient(idx, &mut grad);
                    for j in 0..d {
                        let o_ij = self.o[tri_index(d, i, j)].slices[k][idx];
                        worst = worst.max((o_ij - grad[j]).abs());
                    }
                }
            }
        }
        worst
    }
}

/// Everything a bridge construction produces.
pub struct BridgeOutput {
    pub u: TimeField,
    pub s: TimeField,
    pub hf: HorizontalField,
    pub spec: DiffusionSpec,
    pub ensemble: PathEnsemble,
    /// Dual field v for Born marginals when an initial density was given.
    pub v_dual: Option<TimeField>,
}

/// Simulation options for the path stage of a pipeline.
#[derive(Clone, Copy)]
pub struct SimOptions {
    pub n_paths: usize,
    pub seed: u64,
    /// Simulation step; defaults to the PDE step when `None`.
    pub dt: Option<f64>,
    /// Simulate only up to this time (defaults to the full grid).
    pub t_end: Option<f64>,
}

impl SimOptions {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        SimOptions {
            n_paths,
            seed,
            dt: None,
            t_end: None,
        }
    }
}

/// Relative floor added to terminal surrogates so that the log transform
/// stays finite through the whole backward sweep.
pub const TERMINAL_FLOOR_REL: f64 = 1e-12;

/// Gaussian endpoint surrogate `exp(S_T)` for a narrow bridge target at
/// `center` with width `w`, floored at a tiny positive background.
pub fn endpoint_surrogate(grid: &Arc<SpaceGrid>, center: &[f64], w: f64) -> GridFunction {
    let d = grid.dim();
    let peak = 1.0 / (std::f64::consts::TAU * w * w).sqrt().powi(d as i32);
    GridFunction::from_fn(grid, |x| {
        let mut q = 0.0;
        for i in 0..d {
            q += (x[i] - center[i]) * (x[i] - center[i]);
        }
        (-(q) / (2.0 * w * w)).exp() * peak + TERMINAL_FLOOR_REL * peak
    })
}

/// Builds the Bernstein (reciprocal) process of the reference diffusion
/// with tangent drift `b`, potential `F` and diffusivity `epsilon`:
/// solves the backward equation for u with terminal data `u_T = e^{S_T/ε}`
/// represented by `u_terminal`, sets `S = ε ln u`, `(p, o) = d²S`, drift
/// `g∇S + b` and simulates the ensemble from `mu0`.
#[allow(clippy::too_many_arguments)]
pub fn bernstein_bridge(
    model: Arc<ManifoldModel>,
    b: Option<VectorField>,
    f_potential: Option<ScalarField>,
    mu0: InitialCondition,
    mu0_density: Option<GridFunction>,
    u_terminal: &GridFunction,
    tgrid: TimeGrid,
    epsilon: f64,
    sim: SimOptions,
) -> Result<BridgeOutput> {
    if !model.is_flat() {
        return Err(CoreError::UnsupportedForm(
            "the grid pipeline runs on flat or periodic charts".into(),
        ));
    }
    let prob = BackwardProblem {
        drift: b.clone(),
        potential: f_potential.as_ref().map(|f| {
            let f = f.clone();
            let inv_eps = 1.0 / epsilon;
            Arc::new(move |t: f64, x: &[f64]| f(t, x) * inv_eps) as ScalarField
        }),
        kappa: epsilon,
    };
    let (u, _diag) = solve_backward(&prob, u_terminal, tgrid)?;
    let s = hjb_from_u(&u, epsilon)?;
    let hf = HorizontalField::from_principal_function(s.clone());

    // drift field g∇S + b interpolated from the stored momentum components;
    // flat charts skip the metric entirely
    let d = model.dim();
    let p_fields: Arc<Vec<TimeField>> = Arc::new(hf.p.clone());
    let flat = model.is_flat();
    let model_drift = model.clone();
    let b_for_drift = b.clone();
    let drift: VectorField = Arc::new(move |t: f64, x: &[f64], out: &mut [f64]| {
        let mut pbuf = [0.0f64; 4];
        let p = &mut pbuf[..d];
        for (i, f) in p_fields.iter().enumerate() {
            p[i] = f.eval(t, x);
        }
        if flat {
            out[..d].copy_from_slice(p);
        } else {
            let ginv = model_drift
                .inverse_metric(x)
                .unwrap_or_else(|_| SymMat::identity(d));
            ginv.matvec(p, out);
        }
        if let Some(bf) = &b_for_drift {
            let mut bbuf = [0.0f64; 4];
            let bv = &mut bbuf[..d];
            bf(t, x, bv);
            for i in 0..d {
                out[i] += bv[i];
            }
        }
    });
    let spec = DiffusionSpec {
        model: model.clone(),
        drift,
        diffusion: DiffusionCoeff::InverseMetric { scale: epsilon },
        label: format!("bernstein-eps{epsilon}"),
    };

    let t_end = sim.t_end.unwrap_or(tgrid.t1);
    let dt = sim.dt.unwrap_or_else(|| tgrid.dt());
    let steps = ((t_end - tgrid.t0) / dt).round().max(1.0) as usize;
    let grid_sim = SimGrid::new(tgrid.t0, dt, steps);
    let ensemble = integrate_sde(&spec, &mu0, grid_sim, sim.n_paths, sim.seed)?;

    // dual field for Born marginals
    let v_dual = match mu0_density {
        Some(mu0d) => {
            let u0 = u.slice(0);
            let mut v0 = GridFunction {
                grid: u0.grid.clone(),
                values: mu0d
                    .values
                    .iter()
                    .zip(&u0.values)
                    .map(|(m, uu)| m / uu)
                    .collect(),
            };
            v0.normalize()?;
            let (v, _) = solve_forward(&v0, b.clone(), tgrid, epsilon)?;
            Some(v)
        }
        None => None,
    };

    Ok(BridgeOutput {
        u,
        s,
        hf,
        spec,
        ensemble,
        v_dual,
    })
}

/// Output of a stochastic Hamilton run: the projective diffusion plus the
/// horizontal field sampled along it on demand.
pub struct HamiltonRun {
    pub bridge: BridgeOutput,
    pub epsilon: f64,
}

impl HamiltonRun {
    /// `p(t_k, X_n(t_k))`.
    pub fn p_sample(&self, path: usize, step: usize, out: &mut [f64]) {
        let t = self.bridge.ensemble.times[step];
        let x = self.bridge.ensemble.point(path, step);
        self.bridge.hf.p_at(t, x, out);
    }

    pub fn o_sample(&self, path: usize, step: usize) -> SymMat {
        let t = self.bridge.ensemble.times[step];
        let x = self.bridge.ensemble.point(path, step);
        self.bridge.hf.o_at(t, x)
    }
}

/// Solves the Maxwell-closed stochastic Hamilton system for a canonical
/// lift of a quadratic classical Hamiltonian: the p-PDE through the linear
/// u-equation, then the forward MDE pair.
pub fn stochastic_hamilton_run(
    hbar: &SecondOrderHamiltonian,
    mu0: InitialCondition,
    mu0_density: Option<GridFunction>,
    u_terminal: &GridFunction,
    tgrid: TimeGrid,
    sim: SimOptions,
) -> Result<HamiltonRun> {
    let (model, b, f) = match &hbar.base {
        ClassicalHamiltonian::Quadratic { model, b, f } => {
            (model.clone(), Some(b.clone()), Some(f.clone()))
        }
        ClassicalHamiltonian::Custom { .. } => {
            return Err(CoreError::UnsupportedForm(
                "stochastic Hamilton runs need a canonical lift of the quadratic family".into(),
            ))
        }
    };
    let bridge = bernstein_bridge(
        model,
        b,
        f,
        mu0,
        mu0_density,
        u_terminal,
        tgrid,
        hbar.epsilon,
        sim,
    )?;
    Ok(HamiltonRun {
        bridge,
        epsilon: hbar.epsilon,
    })
}

/// Kernel-regression statistic of one scalar target per path.
pub struct CellStat {
    pub x: Vec<f64>,
    pub mean: f64,
    pub se: f64,
    pub ess: f64,
    pub masked: bool,
}

/// Nadaraya-Watson regression of per-path values against `X_n(t_k)`.
pub fn kernel_regress(
    ens: &PathEnsemble,
    t_index: usize,
    values: &[f64],
    eval: &EvalGrid,
    bandwidth: &[f64],
) -> Vec<CellStat> {
    let d = ens.dim;
    let cells = eval.len();
    let block = 8192usize;
    let usable: Vec<usize> = (0..ens.n_paths)
        .filter(|&n| ens.is_alive(n, t_index + 1))
        .collect();
    let partials: Vec<Vec<f64>> = usable
        .par_chunks(block)
        .map(|chunk| {
            let mut acc = vec![0.0; cells * 4];
            let mut xc = vec![0.0; d];
            let mut delta = vec![0.0; d];
            for &n in chunk {
                let x0 = ens.point(n, t_index);
                let z = values[n];
                for c in 0..cells {
                    eval.coord(c, &mut xc);
                    ens.model.coord_delta(x0, &xc, &mut delta);
                    let mut arg = 0.0;
                    for i in 0..d {
                        let s = delta[i] / bandwidth[i];
                        arg += s * s;
                    }
                    if arg > 40.0 {
                        continue;
                    }
                    let w = (-0.5 * arg).exp();
                    let a = &mut acc[c * 4..(c + 1) * 4];
                    a[0] += w;
                    a[1] += w * w;
                    a[2] += w * z;
                    a[3] += w * z * z;
                }
            }
            acc
        })
        .collect();
    let mut acc = vec![0.0; cells * 4];
    for p in &partials {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    (0..cells)
        .map(|c| {
            let a = &acc[c * 4..(c + 1) * 4];
            let mut xc = vec![0.0; d];
            eval.coord(c, &mut xc);
            let sw = a[0];
            let ess = if a[1] > 0.0 { sw * sw / a[1] } else { 0.0 };
            if ess < crate::diffusion::MIN_CELL_ESS || sw <= 0.0 {
                return CellStat {
                    x: xc,
                    mean: 0.0,
                    se: 0.0,
                    ess,
                    masked: true,
                };
            }
            let mean = a[2] / sw;
            let var = (a[3] / sw - mean * mean).max(0.0);
            CellStat {
                x: xc,
                mean,
                se: (var / ess).sqrt(),
                ess,
                masked: false,
            }
        })
        .collect()
}

/// Report of the Newton-type law `D[p(t, X(t))] = -∇F(X(t))`.
pub struct NewtonReport {
    pub cells: Vec<CellStat>,
    /// Least-squares slope and intercept of the estimate against x (1D).
    pub slope: f64,
    pub intercept: f64,
    /// Sup of |estimate - (-∇F)| over unmasked cells.
    pub sup_residual: f64,
    /// Largest residual measured in standard errors.
    pub sigma_ratio: f64,
}

/// Estimates `D[p(t, X(t))]` by kernel regression of momentum increments
/// pooled over the given window of time indices, and compares with the
/// force field `-∇F`.
pub fn newton_residual(
    run: &HamiltonRun,
    minus_grad_f: &dyn Fn(f64, &[f64], &mut [f64]),
    eval: &EvalGrid,
    t_indices: &[usize],
    component: usize,
) -> Result<NewtonReport> {
    let ens = &run.bridge.ensemble;
    let d = ens.dim;
    if t_indices.is_empty() {
        return Err(CoreError::Precondition("need at least one time index".into()));
    }
    // pooled accumulation over windows: average the per-window regressions
    let mut pooled: Vec<(f64, f64, f64)> = vec![(0.0, 0.0, 0.0); eval.len()]; // sum mean, sum se^2, count
    let mut xs = vec![0.0; d];
    for &k in t_indices {
        if k + 1 >= ens.times.len() {
            return Err(CoreError::Precondition("time index out of range".into()));
        }
        let dt = ens.times[k + 1] - ens.times[k];
        // per-path increment of the sampled momentum component
        let values: Vec<f64> = (0..ens.n_paths)
            .into_par_iter()
            .map(|n| {
                let mut p0 = vec![0.0; d];
                let mut p1 = vec![0.0; d];
                let t0 = ens.times[k];
                let t1 = ens.times[k + 1];
                run.bridge.hf.p_at(t0, ens.point(n, k), &mut p0);
                run.bridge.hf.p_at(t1, ens.point(n, k + 1), &mut p1);
                (p1[component] - p0[component]) / dt
            })
            .collect();
        // Silverman-ish bandwidth from the cloud at this time
        let usable: Vec<usize> = (0..ens.n_paths).filter(|&n| ens.is_alive(n, k + 1)).collect();
        let nn = usable.len().max(2) as f64;
        let mut h = vec![0.0; d];
        for (i, hi) in h.iter_mut().enumerate() {
            let (mut s1, mut s2) = (0.0, 0.0);
            for &p in &usable {
                let v = ens.point(p, k)[i];
                s1 += v;
                s2 += v * v;
            }
            let var = (s2 / nn - (s1 / nn) * (s1 / nn)).max(1e-300);
            *hi = (1.06 * var.sqrt() * nn.powf(-0.2)).max(1e-9);
        }
        let stats = kernel_regress(ens, k, &values, eval, &h);
        for (c, st) in stats.iter().enumerate() {
            if !st.masked {
                pooled[c].0 += st.mean;
                pooled[c].1 += st.se * st.se;
                pooled[c].2 += 1.0;
            }
        }
    }

    let mut cells = Vec::with_capacity(eval.len());
    let (mut sx, mut sy, mut sxx, mut sxy, mut m) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut sup = 0.0f64;
    let mut ratio = 0.0f64;
    let mut force = vec![0.0; d];
    for (c, &(sum, var_sum, count)) in pooled.iter().enumerate() {
        eval.coord(c, &mut xs);
        if count == 0.0 {
            cells.push(CellStat {
                x: xs.clone(),
                mean: 0.0,
                se: 0.0,
                ess: 0.0,
                masked: true,
            });
            continue;
        }
        let mean = sum / count;
        let se = var_sum.sqrt() / count;
        minus_grad_f(0.0, &xs, &mut force);
        let resid = (mean - force[component]).abs();
        sup = sup.max(resid);
        ratio = ratio.max(resid / se.max(1e-300));
        sx += xs[component];
        sy += mean;
        sxx += xs[component] * xs[component];
        sxy += xs[component] * mean;
        m += 1.0;
        cells.push(CellStat {
            x: xs.clone(),
            mean,
            se,
            ess: count,
            masked: false,
        });
    }
    if m < 2.0 {
        return Err(CoreError::Estimation("not enough live cells".into()));
    }
    let denom = m * sxx - sx * sx;
    let slope = if denom.abs() > 1e-12 {
        (m * sxy - sx * sy) / denom
    } else {
        0.0
    };
    let intercept = (sy - slope * sx) / m;
    Ok(NewtonReport {
        cells,
        slope,
        intercept,
        sup_residual: sup,
        sigma_ratio: ratio,
    })
}

/// Stochastic Euler-Lagrange residual on the grid for the quadratic family:
/// `(D̄/dt)(d_ẋ L0) - d_x L0` with `d_ẋ L0 = p = ∇S`,
/// `D̄/dt = ∂_t + ∇_{∇S + b} + (ε/2) Δ` (flat charts) and
/// `d_x L0(∂_k) = -(∂_k b^j) p_j - ∂_k F`.
pub struct SelReport {
    pub sup: f64,
    pub l2: f64,
}

pub fn sel_residual(
    l0: &Lagrangian,
    hf: &HorizontalField,
    epsilon: f64,
    region: Option<&dyn Fn(f64, &[f64]) -> bool>,
) -> Result<SelReport> {
    let (model, b, f) = match l0 {
        Lagrangian::Quadratic { model, b, f } => (model.clone(), b.clone(), f.clone()),
        _ => {
            return Err(CoreError::UnsupportedForm(
                "S-EL residual needs the quadratic Lagrangian family".into(),
            ))
        }
    };
    if !model.is_flat() {
        return Err(CoreError::UnsupportedForm(
            "S-EL grid residual runs on flat or periodic charts".into(),
        ));
    }
    let maxwell = hf.maxwell_residual(region);
    if maxwell > 1e-3 {
        return Err(CoreError::InconsistentField(format!(
            "Maxwell relations violated at {maxwell:.3e}"
        )));
    }
    let d = hf.dim;
    let grid = &hf.grid;
    let dt = hf.tgrid.dt();
    let fd_h = 1e-5;
    let mut sup = 0.0f64;
    let mut l2 = 0.0;
    let mut count = 0usize;
    let mut x = vec![0.0; d];
    let mut grad_k = vec![0.0; d];
    let mut bv = vec![0.0; d];
    for k in 0..hf.tgrid.steps {
        let t_mid = 0.5 * (hf.tgrid.time(k) + hf.tgrid.time(k + 1));
        // averaged momentum slices at the half level, one grid function per
        // component
        let p_mid: Vec<GridFunction> = (0..d)
            .map(|i| GridFunction {
                grid: grid.clone(),
                values: hf.p[i].slices[k]
                    .iter()
                    .zip(&hf.p[i].slices[k + 1])
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect(),
            })
            .collect();
        for idx in 0..grid.node_count() {
            if !grid.is_interior(idx) {
                continue;
            }
            grid.node_coord(idx, &mut x);
            if let Some(mask) = region {
                if !mask(t_mid, &x) {
                    continue;
                }
            }
            b(t_mid, &x, &mut bv);
            // velocity of the transport operator: ∇S + b = p + b (flat)
            let v: Vec<f64> = (0..d).map(|i| p_mid[i].values[idx] + bv[i]).collect();
            for kk in 0..d {
                // material + diffusion part on component kk
                let dpdt = (hf.p[kk].slices[k + 1][idx] - hf.p[kk].slices[k][idx]) / dt;
                p_mid[kk].node_gradient(idx, &mut grad_k);
                let mut adv = 0.0;
                for j in 0..d {
                    adv += v[j] * grad_k[j];
                }
                let hess = p_mid[kk].node_hessian(idx);
                let mut lap = 0.0;
                for j in 0..d {
                    lap += hess.get(j, j);
                }
                // d_x L0 = -(∂_k b^j) p_j - ∂_k F by differences in x_k
                let mut xp = x.clone();
                xp[kk] += fd_h;
                let mut xm = x.clone();
                xm[kk] -= fd_h;
                let mut bp = vec![0.0; d];
                let mut bm = vec![0.0; d];
                b(t_mid, &xp, &mut bp);
                b(t_mid, &xm, &mut bm);
                let mut dxl = 0.0;
                for j in 0..d {
                    dxl -= (bp[j] - bm[j]) / (2.0 * fd_h) * p_mid[j].values[idx];
                }
                dxl -= (f(t_mid, &xp) - f(t_mid, &xm)) / (2.0 * fd_h);

                let r = dpdt + adv + 0.5 * epsilon * lap - dxl;
                sup = sup.max(r.abs());
                l2 += r * r;
                count += 1;
            }
        }
    }
    Ok(SelReport {
        sup,
        l2: if count > 0 {
            (l2 / count as f64).sqrt()
        } else {
            0.0
        },
    })
}

/// Monte Carlo action of an ensemble against a velocity field:
/// `(1/N) Σ_n Σ_k L0(t_k, X_n(t_k), v(t_k, X_n(t_k))) Δt`.
pub struct ActionEstimate {
    pub value: f64,
    pub se: f64,
    /// Paths skipped because the velocity field left its domain.
    pub masked_paths: usize,
}

pub fn action(
    l0: &Lagrangian,
    ens: &PathEnsemble,
    velocity: &(dyn Fn(f64, &[f64], &mut [f64]) + Sync),
    t_end_index: usize,
) -> Result<ActionEstimate> {
    let d = ens.dim;
    let per_path: Vec<Option<f64>> = (0..ens.n_paths)
        .into_par_iter()
        .map(|n| {
            let mut total = 0.0;
            let mut v = vec![0.0; d];
            for k in 0..t_end_index {
                if !ens.is_alive(n, k + 1) {
                    return None;
                }
                let t = ens.times[k];
                let x = ens.point(n, k);
                velocity(t, x, &mut v);
                if v.iter().any(|z| !z.is_finite()) {
                    return None;
                }
                total += l0.eval(t, x, &v) * (ens.times[k + 1] - ens.times[k]);
            }
            Some(total)
        })
        .collect();
    let live: Vec<f64> = per_path.iter().filter_map(|v| *v).collect();
    if live.len() < 2 {
        return Err(CoreError::Estimation("action has no usable paths".into()));
    }
    let n = live.len() as f64;
    let mean = live.iter().sum::<f64>() / n;
    let var = live.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(ActionEstimate {
        value: mean,
        se: (var / n).sqrt(),
        masked_paths: ens.n_paths - live.len(),
    })
}

/// Space-time symmetry data for a Noether charge.
pub struct NoetherData {
    pub v0: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub v: VectorField,
    pub phi: ScalarField,
}

pub struct NoetherReport {
    /// Charge field J(t, x) per time level.
    pub charge: TimeField,
    /// Total-mean-derivative residual per half time level.
    pub residual: TimeField,
    pub sup: f64,
    pub hjb_precheck: f64,
}

/// Noether charge `J = V^i p_i - V⁰ E - Φ` on the grid and its total mean
/// derivative `∂_t J + (∇S + b)·∇J + (ε/2) ΔJ` (flat charts). Fails if S
/// does not satisfy its HJB equation to `precheck_tol`.
#[allow(clippy::too_many_arguments)]
pub fn noether_residual(
    nd: &NoetherData,
    l0: &Lagrangian,
    s: &TimeField,
    epsilon: f64,
    precheck_tol: f64,
    region: Option<&dyn Fn(f64, &[f64]) -> bool>,
) -> Result<NoetherReport> {
    let (model, b, f) = match l0 {
        Lagrangian::Quadratic { model, b, f } => (model.clone(), b.clone(), f.clone()),
        _ => {
            return Err(CoreError::UnsupportedForm(
                "Noether residual needs the quadratic Lagrangian family".into(),
            ))
        }
    };
    if !model.is_flat() {
        return Err(CoreError::UnsupportedForm(
            "Noether grid residual runs on flat or periodic charts".into(),
        ));
    }
    let d = s.grid.dim();
    // precheck: S must solve the HJB for the canonical lift of L0
    let ham = {
        let b = b.clone();
        let f = f.clone();
        move |t: f64, x: &[f64], p: &[f64], o: &SymMat| -> f64 {
            let mut bv = vec![0.0; d];
            b(t, x, &mut bv);
            let mut h = f(t, x);
            for i in 0..d {
                h += 0.5 * p[i] * p[i] + bv[i] * p[i] + 0.5 * epsilon * o.get(i, i);
            }
            h
        }
    };
    let pre = hjb_residual(s, &ham, region);
    if pre.sup > precheck_tol {
        return Err(CoreError::Precondition(format!(
            "S does not satisfy its HJB equation: residual {:.3e} > {precheck_tol:.3e}",
            pre.sup
        )));
    }

    // charge J per time level
    let grid = s.grid.clone();
    let nodes = grid.node_count();
    let levels = s.slices.len();
    let mut j_slices = vec![vec![0.0; nodes]; levels];
    let mut x = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let mut bv = vec![0.0; d];
    let mut vv = vec![0.0; d];
    for (k, slice) in s.slices.iter().enumerate() {
        let t = s.tgrid.time(k);
        let gf = GridFunction {
            grid: grid.clone(),
            values: slice.clone(),
        };
        for idx in 0..nodes {
            grid.node_coord(idx, &mut x);
            gf.node_gradient(idx, &mut grad);
            let hess = gf.node_hessian(idx);
            let mut lap = 0.0;
            for i in 0..d {
                lap += hess.get(i, i);
            }
            b(t, &x, &mut bv);
            (nd.v)(t, &x, &mut vv);
            // E0 = 1/2 |∇S|^2 + <∇S, b> + F; E = E0 + (ε/2) ΔS
            let mut e0 = f(t, &x);
            for i in 0..d {
                e0 += 0.5 * grad[i] * grad[i] + grad[i] * bv[i];
            }
            let e = e0 + 0.5 * epsilon * lap;
            let mut j = -(nd.v0)(t) * e - (nd.phi)(t, &x);
            for i in 0..d {
                j += vv[i] * grad[i];
            }
            j_slices[k][idx] = j;
        }
    }
    let charge = TimeField {
        grid: grid.clone(),
        tgrid: s.tgrid,
        slices: j_slices,
    };

    // total mean derivative of J at half levels
    let dt = s.tgrid.dt();
    let mut res_slices = Vec::with_capacity(s.tgrid.steps);
    let mut sup = 0.0f64;
    for k in 0..s.tgrid.steps {
        let t_mid = 0.5 * (s.tgrid.time(k) + s.tgrid.time(k + 1));
        let j_mid = GridFunction {
            grid: grid.clone(),
            values: charge.slices[k]
                .iter()
                .zip(&charge.slices[k + 1])
                .map(|(a, b)| 0.5 * (a + b))
                .collect(),
        };
        let s_mid = GridFunction {
            grid: grid.clone(),
            values: s.slices[k]
                .iter()
                .zip(&s.slices[k + 1])
                .map(|(a, b)| 0.5 * (a + b))
                .collect(),
        };
        let mut res = vec![0.0; nodes];
        for idx in 0..nodes {
            if !grid.is_interior(idx) {
                continue;
            }
            grid.node_coord(idx, &mut x);
            if let Some(mask) = region {
                if !mask(t_mid, &x) {
                    continue;
                }
            }
            let djdt = (charge.slices[k + 1][idx] - charge.slices[k][idx]) / dt;
            j_mid.node_gradient(idx, &mut grad);
            s_mid.node_gradient(idx, &mut vv);
            b(t_mid, &x, &mut bv);
            let mut adv = 0.0;
            for i in 0..d {
                adv += (vv[i] + bv[i]) * grad[i];
            }
            let hess = j_mid.node_hessian(idx);
            let mut lap = 0.0;
            for i in 0..d {
                lap += hess.get(i, i);
            }
            let r = djdt + adv + 0.5 * epsilon * lap;
            res[idx] = r;
            sup = sup.max(r.abs());
        }
        res_slices.push(res);
    }
    Ok(NoetherReport {
        charge,
        residual: TimeField {
            grid,
            tgrid: s.tgrid,
            slices: res_slices,
        },
        sup,
        hjb_precheck: pre.sup,
    })
}

/// Per-step ensemble means of the second-order Hamiltonian along a run.
pub struct EnergyReport {
    pub times: Vec<f64>,
    pub means: Vec<f64>,
    /// Least-squares slope of the per-path energy trajectories: mean and
    /// standard error across paths.
    pub slope: f64,
    pub slope_se: f64,
    pub max_deviation_from_average: f64,
    pub conserved_at_3se: bool,
}

/// Monte Carlo check of stochastic energy conservation
/// `𝔼 H̄(X(t), p(t, X), o(t, X))` over time.
pub fn energy_conservation_check(
    hbar: &SecondOrderHamiltonian,
    run: &HamiltonRun,
    stride: usize,
) -> Result<EnergyReport> {
    let ens = &run.bridge.ensemble;
    let ks: Vec<usize> = (0..ens.times.len()).step_by(stride.max(1)).collect();
    let d = ens.dim;
    // per-path energies at the sampled steps
    let table: Vec<Vec<f64>> = (0..ens.n_paths)
        .into_par_iter()
        .map(|n| {
            let mut p = vec![0.0; d];
            ks.iter()
                .map(|&k| {
                    let t = ens.times[k];
                    let x = ens.point(n, k);
                    run.bridge.hf.p_at(t, x, &mut p);
                    let o = run.bridge.hf.o_at(t, x);
                    hbar.eval(t, x, &p, &o)
                })
                .collect()
        })
        .collect();
    let times: Vec<f64> = ks.iter().map(|&k| ens.times[k]).collect();
    let m = ks.len() as f64;
    let t_mean = times.iter().sum::<f64>() / m;
    let t_var: f64 = times.iter().map(|t| (t - t_mean) * (t - t_mean)).sum();
    if t_var <= 0.0 {
        return Err(CoreError::Precondition("need at least two time samples".into()));
    }
    let mut means = vec![0.0; ks.len()];
    let mut slopes = Vec::with_capacity(ens.n_paths);
    for row in &table {
        let mut num = 0.0;
        for (j, &e) in row.iter().enumerate() {
            means[j] += e;
            num += (times[j] - t_mean) * e;
        }
        slopes.push(num / t_var);
    }
    for v in &mut means {
        *v /= ens.n_paths as f64;
    }
    let n = slopes.len() as f64;
    let slope = slopes.iter().sum::<f64>() / n;
    let svar = slopes.iter().map(|s| (s - slope) * (s - slope)).sum::<f64>() / (n - 1.0);
    let slope_se = (svar / n).sqrt();
    let avg = means.iter().sum::<f64>() / m;
    let max_dev = means
        .iter()
        .fold(0.0f64, |acc, v| acc.max((v - avg).abs()));
    Ok(EnergyReport {
        times,
        means,
        slope,
        slope_se,
        max_deviation_from_average: max_dev,
        conserved_at_3se: slope.abs() <= 3.0 * slope_se,
    })
}

pub mod canonical;
