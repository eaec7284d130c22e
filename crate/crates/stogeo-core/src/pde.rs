//! Grid solvers: Kolmogorov backward equation, Fokker-Planck forward
//! equation, the log transform to HJB, HJB residual evaluation and
//! Born-formula marginals.
//!
//! The solvers work on flat rectangular grids in dimension 1 or 2, with
//! periodic or homogeneous-Neumann boundaries. Time stepping is
//! Crank-Nicolson (theta = 1/2); 2D uses Peaceman-Rachford dimension
//! splitting. Manifold cases are verified elsewhere through closed forms
//! and Monte Carlo, not through these solvers.

use crate::error::{CoreError, Result};
use crate::fields::{ScalarField, VectorField};
use crate::linalg::{solve_cyclic_tridiag, solve_tridiag, SymMat};
use std::io::Write;
use std::sync::Arc;

/// One spatial axis: `cells` intervals on [min, max], periodic or Neumann.
#[derive(Debug, Clone)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub cells: usize,
    pub periodic: bool,
}

impl Axis {
    pub fn bounded(min: f64, max: f64, cells: usize) -> Self {
        Axis {
            min,
            max,
            cells,
            periodic: false,
        }
    }

    pub fn periodic(min: f64, max: f64, cells: usize) -> Self {
        Axis {
            min,
            max,
            cells,
            periodic: true,
        }
    }

    pub fn dx(&self) -> f64 {
        (self.max - self.min) / self.cells as f64
    }

    /// Number of stored nodes: periodic axes do not duplicate the endpoint.
    pub fn nodes(&self) -> usize {
        if self.periodic {
            self.cells
        } else {
            self.cells + 1
        }
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.min + i as f64 * self.dx()
    }
}

/// Rectangular spatial grid, dimension 1 or 2.
#[derive(Debug, Clone)]
pub struct SpaceGrid {
    pub axes: Vec<Axis>,
}

impl SpaceGrid {
    pub fn new(axes: Vec<Axis>) -> Result<Arc<Self>> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(CoreError::Shape(
                "grid dimension must be 1 or 2".into(),
            ));
        }
        for a in &axes {
            if a.cells < 8 {
                return Err(CoreError::Shape(format!(
                    "axis needs at least 8 cells, got {}",
                    a.cells
                )));
            }
            if !(a.max > a.min) {
                return Err(CoreError::Shape("axis max must exceed min".into()));
            }
        }
        Ok(Arc::new(SpaceGrid { axes }))
    }

    pub fn line(min: f64, max: f64, cells: usize) -> Arc<Self> {
        Self::new(vec![Axis::bounded(min, max, cells)]).expect("valid axis")
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn node_count(&self) -> usize {
        self.axes.iter().map(|a| a.nodes()).product()
    }

    /// Flattened index; axis 0 is the slowest.
    pub fn flat(&self, multi: &[usize]) -> usize {
        match self.dim() {
            1 => multi[0],
            _ => multi[0] * self.axes[1].nodes() + multi[1],
        }
    }

    pub fn unflat(&self, idx: usize) -> Vec<usize> {
        match self.dim() {
            1 => vec![idx],
            _ => {
                let n1 = self.axes[1].nodes();
                vec![idx / n1, idx % n1]
            }
        }
    }

    pub fn node_coord(&self, idx: usize, out: &mut [f64]) {
        let multi = self.unflat(idx);
        for (k, &i) in multi.iter().enumerate() {
            out[k] = self.axes[k].coord(i);
        }
    }

    /// True for nodes not on a non-periodic boundary.
    pub fn is_interior(&self, idx: usize) -> bool {
        let multi = self.unflat(idx);
        multi.iter().zip(&self.axes).all(|(&i, a)| {
            a.periodic || (i > 0 && i + 1 < a.nodes())
        })
    }

    /// Quadrature weight of a node (trapezoid on bounded axes).
    pub fn node_weight(&self, idx: usize) -> f64 {
        let multi = self.unflat(idx);
        let mut w = 1.0;
        for (k, &i) in multi.iter().enumerate() {
            let a = &self.axes[k];
            let mut wk = a.dx();
            if !a.periodic && (i == 0 || i + 1 == a.nodes()) {
                wk *= 0.5;
            }
            w *= wk;
        }
        w
    }
}

/// Uniform time grid on [t0, t1] with `steps` intervals.
#[derive(Debug, Clone, Copy)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Self {
        assert!(t1 > t0 && steps >= 1);
        TimeGrid { t0, t1, steps }
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt()
    }
}

/// Scalar field sampled on grid nodes at one time.
#[derive(Debug, Clone)]
pub struct GridFunction {
    pub grid: Arc<SpaceGrid>,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn from_fn(grid: &Arc<SpaceGrid>, f: impl Fn(&[f64]) -> f64) -> Self {
        let mut values = vec![0.0; grid.node_count()];
        let mut x = vec![0.0; grid.dim()];
        for (idx, v) in values.iter_mut().enumerate() {
            grid.node_coord(idx, &mut x);
            *v = f(&x);
        }
        GridFunction {
            grid: grid.clone(),
            values,
        }
    }

    pub fn constant(grid: &Arc<SpaceGrid>, c: f64) -> Self {
        GridFunction {
            grid: grid.clone(),
            values: vec![c; grid.node_count()],
        }
    }

    pub fn integrate(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.grid.node_weight(i))
            .sum()
    }

    /// Normalizes to unit mass in place; returns the mass before scaling.
    pub fn normalize(&mut self) -> Result<f64> {
        let m = self.integrate();
        if !(m > 0.0) {
            return Err(CoreError::Numeric(format!(
                "cannot normalize grid function with mass {m:.3e}"
            )));
        }
        for v in &mut self.values {
            *v /= m;
        }
        Ok(m)
    }

    /// Multilinear interpolation; periodic axes wrap, bounded axes clamp.
    pub fn eval(&self, x: &[f64]) -> f64 {
        interp_values(&self.grid, &self.values, x)
    }

    /// Centered first differences at a node; one-sided on bounded edges.
    pub fn node_gradient(&self, idx: usize, out: &mut [f64]) {
        let g = &self.grid;
        let multi = g.unflat(idx);
        for axis in 0..g.dim() {
            let a = &g.axes[axis];
            let n = a.nodes();
            let i = multi[axis];
            let dx = a.dx();
            let v = |ii: usize| {
                let mut m = multi.clone();
                m[axis] = ii;
                self.values[g.flat(&m)]
            };
            out[axis] = if a.periodic {
                (v((i + 1) % n) - v((i + n - 1) % n)) / (2.0 * dx)
            } else if i == 0 {
                (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * dx)
            } else if i + 1 == n {
                (3.0 * v(n - 1) - 4.0 * v(n - 2) + v(n - 3)) / (2.0 * dx)
            } else {
                (v(i + 1) - v(i - 1)) / (2.0 * dx)
            };
        }
    }

    /// Centered second differences (coordinate Hessian) at an interior node.
    pub fn node_hessian(&self, idx: usize) -> SymMat {
        let g = &self.grid;
        let d = g.dim();
        let multi = g.unflat(idx);
        let mut h = SymMat::zeros(d);
        let shift = |mut m: Vec<usize>, axis: usize, off: i64| -> f64 {
            let a = &g.axes[axis];
            let n = a.nodes() as i64;
            let mut i = m[axis] as i64 + off;
            if a.periodic {
                i = i.rem_euclid(n);
            } else {
                i = i.clamp(0, n - 1);
            }
            m[axis] = i as usize;
            self.values[g.flat(&m)]
        };
        for axis in 0..d {
            let a = &g.axes[axis];
            let dx = a.dx();
            let i = multi[axis];
            let n = a.nodes();
            let second = if a.periodic || (i > 0 && i + 1 < n) {
                let c = self.values[idx];
                let p = shift(multi.clone(), axis, 1);
                let mm = shift(multi.clone(), axis, -1);
                (p - 2.0 * c + mm) / (dx * dx)
            } else if i == 0 {
                let v0 = self.values[idx];
                let v1 = shift(multi.clone(), axis, 1);
                let v2 = shift(multi.clone(), axis, 2);
                let v3 = shift(multi.clone(), axis, 3);
                (2.0 * v0 - 5.0 * v1 + 4.0 * v2 - v3) / (dx * dx)
            } else {
                let v0 = self.values[idx];
                let v1 = shift(multi.clone(), axis, -1);
                let v2 = shift(multi.clone(), axis, -2);
                let v3 = shift(multi.clone(), axis, -3);
                (2.0 * v0 - 5.0 * v1 + 4.0 * v2 - v3) / (dx * dx)
            };
            h.set(axis, axis, second);
        }
        if d == 2 {
            let dx = g.axes[0].dx();
            let dy = g.axes[1].dx();
            let pp = shift(shift_idx(&multi, 0, 1, g), 1, 1);
            let pm = shift(shift_idx(&multi, 0, 1, g), 1, -1);
            let mp = shift(shift_idx(&multi, 0, -1, g), 1, 1);
            let mm = shift(shift_idx(&multi, 0, -1, g), 1, -1);
            h.set(0, 1, (pp - pm - mp + mm) / (4.0 * dx * dy));
        }
        h
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn shift_idx(multi: &[usize], axis: usize, off: i64, g: &Arc<SpaceGrid>) -> Vec<usize> {
    let a = &g.axes[axis];
    let n = a.nodes() as i64;
    let mut m = multi.to_vec();
    let mut i = m[axis] as i64 + off;
    if a.periodic {
        i = i.rem_euclid(n);
    } else {
        i = i.clamp(0, n - 1);
    }
    m[axis] = i as usize;
    m
}

/// Multilinear interpolation of nodal values without constructing a
/// `GridFunction`; the hot path for field evaluation along sampled paths.
pub fn interp_values(g: &SpaceGrid, values: &[f64], x: &[f64]) -> f64 {
    match g.dim() {
        1 => {
            let (i0, i1, w) = locate(&g.axes[0], x[0]);
            let n1 = g.axes[0].nodes();
            (1.0 - w) * values[i0.min(n1 - 1)] + w * values[i1.min(n1 - 1)]
        }
        _ => {
            let (i0, i1, wi) = locate(&g.axes[0], x[0]);
            let (j0, j1, wj) = locate(&g.axes[1], x[1]);
            let at = |i: usize, j: usize| values[g.flat(&[i, j])];
            (1.0 - wi) * ((1.0 - wj) * at(i0, j0) + wj * at(i0, j1))
                + wi * ((1.0 - wj) * at(i1, j0) + wj * at(i1, j1))
        }
    }
}

fn locate(a: &Axis, x: f64) -> (usize, usize, f64) {
    let dx = a.dx();
    if a.periodic {
        let p = a.max - a.min;
        let xr = (x - a.min).rem_euclid(p);
        let f = xr / dx;
        let i = (f.floor() as usize).min(a.cells - 1);
        (i, (i + 1) % a.cells, f - i as f64)
    } else {
        let f = ((x - a.min) / dx).clamp(0.0, a.cells as f64);
        let i = (f.floor() as usize).min(a.cells - 1);
        (i, i + 1, f - i as f64)
    }
}

/// Scalar field on all time levels of a run.
#[derive(Debug, Clone)]
pub struct TimeField {
    pub grid: Arc<SpaceGrid>,
    pub tgrid: TimeGrid,
    pub slices: Vec<Vec<f64>>,
}

impl TimeField {
    pub fn slice(&self, k: usize) -> GridFunction {
        GridFunction {
            grid: self.grid.clone(),
            values: self.slices[k].clone(),
        }
    }

    /// Linear interpolation in time, multilinear in space.
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        let dt = self.tgrid.dt();
        let f = ((t - self.tgrid.t0) / dt).clamp(0.0, self.tgrid.steps as f64);
        let k = (f.floor() as usize).min(self.tgrid.steps - 1);
        let w = f - k as f64;
        let a = interp_values(&self.grid, &self.slices[k], x);
        if w == 0.0 {
            return a;
        }
        let b = interp_values(&self.grid, &self.slices[k + 1], x);
        (1.0 - w) * a + w * b
    }

    pub fn write_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        let d = self.grid.dim();
        if d == 1 {
            writeln!(w, "t,x0,value")?;
        } else {
            writeln!(w, "t,x0,x1,value")?;
        }
        let mut x = vec![0.0; d];
        for (k, slice) in self.slices.iter().enumerate() {
            let t = self.tgrid.time(k);
            for (idx, v) in slice.iter().enumerate() {
                self.grid.node_coord(idx, &mut x);
                if d == 1 {
                    writeln!(w, "{:.16e},{:.16e},{:.16e}", t, x[0], v)?;
                } else {
                    writeln!(w, "{:.16e},{:.16e},{:.16e},{:.16e}", t, x[0], x[1], v)?;
                }
            }
        }
        Ok(())
    }
}

/// Coefficients of the linear generator `L = kappa/2 Δ + <b, ∇> + F`.
pub struct BackwardProblem {
    pub drift: Option<VectorField>,
    pub potential: Option<ScalarField>,
    /// Coefficient of the half-Laplacian (the diffusivity epsilon).
    pub kappa: f64,
}

impl BackwardProblem {
    pub fn heat() -> Self {
        BackwardProblem {
            drift: None,
            potential: None,
            kappa: 1.0,
        }
    }
}

/// Per-axis tridiagonal operator rows for one time level.
struct AxisOperator {
    sub: Vec<f64>,
    diag: Vec<f64>,
    sup: Vec<f64>,
    periodic: bool,
}

/// Assembles the 1D rows of `L_axis u = kappa/2 u'' + b u' + F u` along one
/// axis (for ADI, `F` is split evenly across axes).
fn assemble_axis_advection(
    axis: &Axis,
    line_coords: impl Fn(usize) -> Vec<f64>,
    t: f64,
    axis_id: usize,
    dim: usize,
    prob: &BackwardProblem,
) -> AxisOperator {
    let n = axis.nodes();
    let dx = axis.dx();
    let k2 = 0.5 * prob.kappa / (dx * dx);
    let mut op = AxisOperator {
        sub: vec![0.0; n],
        diag: vec![0.0; n],
        sup: vec![0.0; n],
        periodic: axis.periodic,
    };
    let mut bvec = vec![0.0; dim];
    for i in 0..n {
        let x = line_coords(i);
        let b = match &prob.drift {
            Some(f) => {
                f(t, &x, &mut bvec);
                bvec[axis_id]
            }
            None => 0.0,
        };
        let f = match &prob.potential {
            Some(f) => f(t, &x) / dim as f64,
            None => 0.0,
        };
        let adv = b / (2.0 * dx);
        if axis.periodic || (i > 0 && i + 1 < n) {
            op.sub[i] = k2 - adv;
            op.diag[i] = -2.0 * k2 + f;
            op.sup[i] = k2 + adv;
        } else if i == 0 {
            // Neumann ghost: u_{-1} = u_1, advection derivative vanishes
            op.sub[i] = 0.0;
            op.diag[i] = -2.0 * k2 + f;
            op.sup[i] = 2.0 * k2;
        } else {
            op.sub[i] = 2.0 * k2;
            op.diag[i] = -2.0 * k2 + f;
            op.sup[i] = 0.0;
        }
    }
    op
}

/// Applies `out = (I + c L) u` for the tridiagonal rows of one axis line.
fn apply_axis(op: &AxisOperator, c: f64, u: &[f64], out: &mut [f64]) {
    let n = u.len();
    for i in 0..n {
        let um = if i > 0 {
            u[i - 1]
        } else if op.periodic {
            u[n - 1]
        } else {
            0.0
        };
        let up = if i + 1 < n {
            u[i + 1]
        } else if op.periodic {
            u[0]
        } else {
            0.0
        };
        out[i] = u[i] + c * (op.sub[i] * um + op.diag[i] * u[i] + op.sup[i] * up);
    }
}

/// Solves `(I - c L) x = rhs` in place for one axis line.
fn solve_axis(op: &AxisOperator, c: f64, rhs: &mut [f64]) -> Result<()> {
    let n = rhs.len();
    let sub: Vec<f64> = op.sub.iter().map(|v| -c * v).collect();
    let diag: Vec<f64> = op.diag.iter().map(|v| 1.0 - c * v).collect();
    let sup: Vec<f64> = op.sup.iter().map(|v| -c * v).collect();
    if op.periodic {
        solve_cyclic_tridiag(&sub, &diag, &sup, sub[0], sup[n - 1], rhs)
    } else {
        solve_tridiag(&sub, &diag, &sup, rhs)
    }
}

/// Report accumulated by the scheme for later inspection.
#[derive(Debug, Clone, Default)]
pub struct SolverDiagnostics {
    /// True when the implicit matrices were M-matrices at every step.
    pub m_matrix: bool,
    /// Total mass renormalization applied by the forward solver.
    pub cumulative_mass_correction: f64,
}

/// Solves the backward equation `∂u/∂t + <b, ∇u> + kappa/2 Δu + F u = 0`
/// from the terminal slice `u_T` down to `t0`, Crank-Nicolson in time.
/// The first two steps off the terminal data are damped with pairs of
/// implicit half-steps (Rannacher smoothing) so that barely resolved
/// terminal spikes do not ring. Returns u on every time level.
pub fn solve_backward(
    prob: &BackwardProblem,
    u_terminal: &GridFunction,
    tgrid: TimeGrid,
) -> Result<(TimeField, SolverDiagnostics)> {
    if u_terminal.min() <= 0.0 {
        return Err(CoreError::Positivity(
            "terminal data for the backward equation must be positive".into(),
        ));
    }
    let grid = u_terminal.grid.clone();
    let steps = tgrid.steps;
    let dt = tgrid.dt();
    let mut slices = vec![Vec::new(); steps + 1];
    slices[steps] = u_terminal.values.clone();
    let mut diag = SolverDiagnostics {
        m_matrix: true,
        ..Default::default()
    };

    for k in (0..steps).rev() {
        let t_new = tgrid.time(k);
        let t_old = tgrid.time(k + 1);
        let smoothing = k + 2 >= steps;
        let u_old = slices[k + 1].clone();
        let u_new = match grid.dim() {
            1 => {
                let axis = &grid.axes[0];
                let op_old = assemble_axis_advection(axis, |i| vec![axis.coord(i)], t_old, 0, 1, prob);
                let op_new = assemble_axis_advection(axis, |i| vec![axis.coord(i)], t_new, 0, 1, prob);
                check_m_matrix(&op_new, 0.5 * dt, &mut diag);
                let mut rhs = u_old;
                if smoothing {
                    solve_axis(&op_old, 0.25 * dt, &mut rhs)?;
                    solve_axis(&op_old, 0.25 * dt, &mut rhs)?;
                    solve_axis(&op_new, 0.25 * dt, &mut rhs)?;
                    solve_axis(&op_new, 0.25 * dt, &mut rhs)?;
                } else {
                    let mut tmp = vec![0.0; rhs.len()];
                    apply_axis(&op_old, 0.5 * dt, &rhs, &mut tmp);
                    rhs = tmp;
                    solve_axis(&op_new, 0.5 * dt, &mut rhs)?;
                }
                rhs
            }
            _ => step_adi(&grid, prob, &u_old, t_old, t_new, dt, smoothing, &mut diag)?,
        };
        if u_new.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric(
                "backward solver produced non-finite values".into(),
            ));
        }
        slices[k] = u_new;
    }
    Ok((
        TimeField {
            grid,
            tgrid,
            slices,
        },
        diag,
    ))
}

fn check_m_matrix(op: &AxisOperator, c: f64, diag: &mut SolverDiagnostics) {
    for i in 0..op.sub.len() {
        if -c * op.sub[i] > 1e-14 || -c * op.sup[i] > 1e-14 {
            diag.m_matrix = false;
        }
    }
}

/// One Peaceman-Rachford step for the 2D backward operator; with
/// `smoothing` the step is replaced by two split implicit half-steps.
#[allow(clippy::too_many_arguments)]
fn step_adi(
    grid: &Arc<SpaceGrid>,
    prob: &BackwardProblem,
    u_old: &[f64],
    t_old: f64,
    t_new: f64,
    dt: f64,
    smoothing: bool,
    diag: &mut SolverDiagnostics,
) -> Result<Vec<f64>> {
    let (n0, n1) = (grid.axes[0].nodes(), grid.axes[1].nodes());
    let t_mid = 0.5 * (t_old + t_new);
    let mut work = u_old.to_vec();

    if smoothing {
        for _half in 0..2 {
            for i1 in 0..n1 {
                let x1 = grid.axes[1].coord(i1);
                let op0 = assemble_axis_advection(
                    &grid.axes[0],
                    |i| vec![grid.axes[0].coord(i), x1],
                    t_mid,
                    0,
                    2,
                    prob,
                );
                let mut line: Vec<f64> = (0..n0).map(|i0| work[i0 * n1 + i1]).collect();
                solve_axis(&op0, 0.5 * dt, &mut line)?;
                for i0 in 0..n0 {
                    work[i0 * n1 + i1] = line[i0];
                }
            }
            for i0 in 0..n0 {
                let x0 = grid.axes[0].coord(i0);
                let op1 = assemble_axis_advection(
                    &grid.axes[1],
                    |i| vec![x0, grid.axes[1].coord(i)],
                    t_mid,
                    1,
                    2,
                    prob,
                );
                let mut line: Vec<f64> = (0..n1).map(|i1| work[i0 * n1 + i1]).collect();
                solve_axis(&op1, 0.5 * dt, &mut line)?;
                for i1 in 0..n1 {
                    work[i0 * n1 + i1] = line[i1];
                }
            }
        }
        return Ok(work);
    }

    // Half step: explicit in axis 1, implicit in axis 0.
    let mut tmp = vec![0.0; work.len()];
    for i0 in 0..n0 {
        let x0 = grid.axes[0].coord(i0);
        let op1 = assemble_axis_advection(
            &grid.axes[1],
            |i| vec![x0, grid.axes[1].coord(i)],
            t_old,
            1,
            2,
            prob,
        );
        let line: Vec<f64> = (0..n1).map(|i1| work[i0 * n1 + i1]).collect();
        let mut out = vec![0.0; n1];
        apply_axis(&op1, 0.5 * dt, &line, &mut out);
        for i1 in 0..n1 {
            tmp[i0 * n1 + i1] = out[i1];
        }
    }
    for i1 in 0..n1 {
        let x1 = grid.axes[1].coord(i1);
        let op0 = assemble_axis_advection(
            &grid.axes[0],
            |i| vec![grid.axes[0].coord(i), x1],
            t_mid,
            0,
            2,
            prob,
        );
        check_m_matrix(&op0, 0.5 * dt, diag);
        let mut line: Vec<f64> = (0..n0).map(|i0| tmp[i0 * n1 + i1]).collect();
        solve_axis(&op0, 0.5 * dt, &mut line)?;
        for i0 in 0..n0 {
            work[i0 * n1 + i1] = line[i0];
        }
    }

    // Half step: explicit in axis 0, implicit in axis 1.
    for i1 in 0..n1 {
        let x1 = grid.axes[1].coord(i1);
        let op0 = assemble_axis_advection(
            &grid.axes[0],
            |i| vec![grid.axes[0].coord(i), x1],
            t_mid,
            0,
            2,
            prob,
        );
        let line: Vec<f64> = (0..n0).map(|i0| work[i0 * n1 + i1]).collect();
        let mut out = vec![0.0; n0];
        apply_axis(&op0, 0.5 * dt, &line, &mut out);
        for i0 in 0..n0 {
            tmp[i0 * n1 + i1] = out[i0];
        }
    }
    for i0 in 0..n0 {
        let x0 = grid.axes[0].coord(i0);
        let op1 = assemble_axis_advection(
            &grid.axes[1],
            |i| vec![x0, grid.axes[1].coord(i)],
            t_new,
            1,
            2,
            prob,
        );
        check_m_matrix(&op1, 0.5 * dt, diag);
        let mut line: Vec<f64> = (0..n1).map(|i1| tmp[i0 * n1 + i1]).collect();
        solve_axis(&op1, 0.5 * dt, &mut line)?;
        for i1 in 0..n1 {
            work[i0 * n1 + i1] = line[i1];
        }
    }
    Ok(work)
}

/// Conservative rows for the forward operator
/// `L mu = -∂(v mu) + kappa/2 ∂² mu` along one axis, flux form.
fn assemble_axis_flux(
    axis: &Axis,
    line_coords: impl Fn(usize) -> Vec<f64>,
    t: f64,
    axis_id: usize,
    dim: usize,
    drift: &Option<VectorField>,
    kappa: f64,
) -> AxisOperator {
    let n = axis.nodes();
    let dx = axis.dx();
    let mut vface = vec![0.0; n + 1]; // face i+1/2 between node i and i+1
    let mut bvec = vec![0.0; dim];
    let mut vnode = vec![0.0; n];
    for (i, vn) in vnode.iter_mut().enumerate() {
        if let Some(f) = drift {
            let x = line_coords(i);
            f(t, &x, &mut bvec);
            *vn = bvec[axis_id];
        }
    }
    for i in 0..n + 1 {
        vface[i] = if axis.periodic {
            0.5 * (vnode[(i + n - 1) % n] + vnode[i % n])
        } else if i == 0 || i == n {
            0.0 // no-flux boundary faces
        } else {
            0.5 * (vnode[i - 1] + vnode[i])
        };
    }
    // flux F_{i+1/2} = vface (mu_i + mu_{i+1})/2 - kappa/2 (mu_{i+1} - mu_i)/dx
    // L mu_i = -(F_{i+1/2} - F_{i-1/2})/dx
    let kd = 0.5 * kappa / dx;
    let mut op = AxisOperator {
        sub: vec![0.0; n],
        diag: vec![0.0; n],
        sup: vec![0.0; n],
        periodic: axis.periodic,
    };
    for i in 0..n {
        let (f_lo, f_hi) = (i, i + 1);
        let bounded_edge_lo = !axis.periodic && i == 0;
        let bounded_edge_hi = !axis.periodic && i + 1 == n;
        // contribution of F_{i+1/2}
        if !bounded_edge_hi {
            op.diag[i] -= (0.5 * vface[f_hi] + kd) / dx;
            op.sup[i] -= (0.5 * vface[f_hi] - kd) / dx;
        }
        // contribution of -F_{i-1/2}
        if !bounded_edge_lo {
            op.diag[i] += (0.5 * vface[f_lo] - kd) / dx;
            op.sub[i] += (0.5 * vface[f_lo] + kd) / dx;
        }
    }
    op
}

/// Solves the Fokker-Planck equation
/// `∂mu/∂t + div(mu v) - kappa/2 Δmu = 0` forward in time with a
/// conservative flux discretization. Renormalizes mass each step and records
/// the cumulative correction.
pub fn solve_forward(
    mu0: &GridFunction,
    drift: Option<VectorField>,
    tgrid: TimeGrid,
    kappa: f64,
) -> Result<(TimeField, SolverDiagnostics)> {
    let grid = mu0.grid.clone();
    if mu0.min() < -1e-12 {
        return Err(CoreError::Scheme(
            "initial density has negative cells".into(),
        ));
    }
    let mut mu = mu0.clone();
    let total0 = mu.integrate();
    if !(total0 > 0.0) {
        return Err(CoreError::Numeric("initial density has no mass".into()));
    }
    let dt = tgrid.dt();
    let mut slices = vec![Vec::new(); tgrid.steps + 1];
    slices[0] = mu.values.clone();
    let mut diag = SolverDiagnostics {
        m_matrix: true,
        ..Default::default()
    };

    for k in 0..tgrid.steps {
        let t_old = tgrid.time(k);
        let t_new = tgrid.time(k + 1);
        let smoothing = k < 2;
        let next = match grid.dim() {
            1 => {
                let axis = &grid.axes[0];
                let op_old =
                    assemble_axis_flux(axis, |i| vec![axis.coord(i)], t_old, 0, 1, &drift, kappa);
                let op_new =
                    assemble_axis_flux(axis, |i| vec![axis.coord(i)], t_new, 0, 1, &drift, kappa);
                let mut rhs = mu.values.clone();
                if smoothing {
                    solve_axis(&op_old, 0.25 * dt, &mut rhs)?;
                    solve_axis(&op_old, 0.25 * dt, &mut rhs)?;
                    solve_axis(&op_new, 0.25 * dt, &mut rhs)?;
                    solve_axis(&op_new, 0.25 * dt, &mut rhs)?;
                } else {
                    let mut tmp = vec![0.0; rhs.len()];
                    apply_axis(&op_old, 0.5 * dt, &rhs, &mut tmp);
                    rhs = tmp;
                    solve_axis(&op_new, 0.5 * dt, &mut rhs)?;
                }
                rhs
            }
            _ => step_adi_forward(&grid, &drift, kappa, &mu.values, t_old, t_new, dt, smoothing)?,
        };
        mu.values = next;
        let scale = mu.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if mu.min() < -1e-10 * scale.max(1.0) {
            return Err(CoreError::Scheme(format!(
                "forward solver produced negative mass {:.3e} at step {k}",
                mu.min()
            )));
        }
        let m = mu.integrate();
        diag.cumulative_mass_correction += (m - total0).abs();
        if m > 0.0 {
            let corr = total0 / m;
            for v in &mut mu.values {
                *v *= corr;
            }
        }
        slices[k + 1] = mu.values.clone();
    }
    Ok((
        TimeField {
            grid,
            tgrid,
            slices,
        },
        diag,
    ))
}

#[allow(clippy::too_many_arguments)]
fn step_adi_forward(
    grid: &Arc<SpaceGrid>,
    drift: &Option<VectorField>,
    kappa: f64,
    mu_old: &[f64],
    t_old: f64,
    t_new: f64,
    dt: f64,
    smoothing: bool,
) -> Result<Vec<f64>> {
    let (n0, n1) = (grid.axes[0].nodes(), grid.axes[1].nodes());
    let t_mid = 0.5 * (t_old + t_new);
    let mut work = mu_old.to_vec();
    let mut tmp = vec![0.0; work.len()];

    if smoothing {
        for _half in 0..2 {
            for i1 in 0..n1 {
                let x1 = grid.axes[1].coord(i1);
                let op0 = assemble_axis_flux(
                    &grid.axes[0],
                    |i| vec![grid.axes[0].coord(i), x1],
                    t_mid,
                    0,
                    2,
                    drift,
                    kappa,
                );
                let mut line: Vec<f64> = (0..n0).map(|i0| work[i0 * n1 + i1]).collect();
                solve_axis(&op0, 0.5 * dt, &mut line)?;
                for i0 in 0..n0 {
                    work[i0 * n1 + i1] = line[i0];
                }
            }
            for i0 in 0..n0 {
                let x0 = grid.axes[0].coord(i0);
                let op1 = assemble_axis_flux(
                    &grid.axes[1],
                    |i| vec![x0, grid.axes[1].coord(i)],
                    t_mid,
                    1,
                    2,
                    drift,
                    kappa,
                );
                let mut line: Vec<f64> = (0..n1).map(|i1| work[i0 * n1 + i1]).collect();
                solve_axis(&op1, 0.5 * dt, &mut line)?;
                for i1 in 0..n1 {
                    work[i0 * n1 + i1] = line[i1];
                }
            }
        }
        return Ok(work);
    }

    for i0 in 0..n0 {
        let x0 = grid.axes[0].coord(i0);
        let op1 = assemble_axis_flux(
            &grid.axes[1],
            |i| vec![x0, grid.axes[1].coord(i)],
            t_old,
            1,
            2,
            drift,
            kappa,
        );
        let line: Vec<f64> = (0..n1).map(|i1| work[i0 * n1 + i1]).collect();
        let mut out = vec![0.0; n1];
        apply_axis(&op1, 0.5 * dt, &line, &mut out);
        for i1 in 0..n1 {
            tmp[i0 * n1 + i1] = out[i1];
        }
    }
    for i1 in 0..n1 {
        let x1 = grid.axes[1].coord(i1);
        let op0 = assemble_axis_flux(
            &grid.axes[0],
            |i| vec![grid.axes[0].coord(i), x1],
            t_mid,
            0,
            2,
            drift,
            kappa,
        );
        let mut line: Vec<f64> = (0..n0).map(|i0| tmp[i0 * n1 + i1]).collect();
        solve_axis(&op0, 0.5 * dt, &mut line)?;
        for i0 in 0..n0 {
            work[i0 * n1 + i1] = line[i0];
        }
    }
    for i1 in 0..n1 {
        let x1 = grid.axes[1].coord(i1);
        let op0 = assemble_axis_flux(
            &grid.axes[0],
            |i| vec![grid.axes[0].coord(i), x1],
            t_mid,
            0,
            2,
            drift,
            kappa,
        );
        let line: Vec<f64> = (0..n0).map(|i0| work[i0 * n1 + i1]).collect();
        let mut out = vec![0.0; n0];
        apply_axis(&op0, 0.5 * dt, &line, &mut out);
        for i0 in 0..n0 {
            tmp[i0 * n1 + i1] = out[i0];
        }
    }
    for i0 in 0..n0 {
        let x0 = grid.axes[0].coord(i0);
        let op1 = assemble_axis_flux(
            &grid.axes[1],
            |i| vec![x0, grid.axes[1].coord(i)],
            t_new,
            1,
            2,
            drift,
            kappa,
        );
        let mut line: Vec<f64> = (0..n1).map(|i1| tmp[i0 * n1 + i1]).collect();
        solve_axis(&op1, 0.5 * dt, &mut line)?;
        for i1 in 0..n1 {
            work[i0 * n1 + i1] = line[i1];
        }
    }
    Ok(work)
}

/// Nodewise log transform `S = epsilon ln u`. Fails on nonpositive nodes.
pub fn hjb_from_u(u: &TimeField, epsilon: f64) -> Result<TimeField> {
    let mut slices = Vec::with_capacity(u.slices.len());
    for (k, s) in u.slices.iter().enumerate() {
        let mut out = Vec::with_capacity(s.len());
        for &v in s {
            if !(v > 0.0) {
                return Err(CoreError::Positivity(format!(
                    "u nonpositive ({v:.3e}) at time level {k}; cannot take log"
                )));
            }
            out.push(epsilon * v.ln());
        }
        slices.push(out);
    }
    Ok(TimeField {
        grid: u.grid.clone(),
        tgrid: u.tgrid,
        slices,
    })
}

/// Second-order Hamiltonian evaluation `(t, x, p, o) -> H`.
pub type HamEval<'a> = &'a dyn Fn(f64, &[f64], &[f64], &SymMat) -> f64;

/// Interior residual of `∂S/∂t + H(x, ∇S, ∇²S, t)`, centered in space and
/// differenced forward in time (so each value sits at a half time level).
#[derive(Debug, Clone)]
pub struct ResidualReport {
    pub sup: f64,
    pub l2: f64,
    /// residual per (time level, node), step index k covers [t_k, t_{k+1})
    pub field: TimeField,
}

pub fn hjb_residual(
    s: &TimeField,
    hamiltonian: HamEval,
    region: Option<&dyn Fn(f64, &[f64]) -> bool>,
) -> ResidualReport {
    let grid = &s.grid;
    let d = grid.dim();
    let dt = s.tgrid.dt();
    let mut sup = 0.0f64;
    let mut l2 = 0.0f64;
    let mut count = 0usize;
    let mut slices = Vec::with_capacity(s.tgrid.steps);
    let mut x = vec![0.0; d];
    let mut p = vec![0.0; d];
    for k in 0..s.tgrid.steps {
        let t_mid = 0.5 * (s.tgrid.time(k) + s.tgrid.time(k + 1));
        let avg: Vec<f64> = s.slices[k]
            .iter()
            .zip(&s.slices[k + 1])
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let gf = GridFunction {
            grid: grid.clone(),
            values: avg,
        };
        let mut res = vec![0.0; grid.node_count()];
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
            let st = (s.slices[k + 1][idx] - s.slices[k][idx]) / dt;
            gf.node_gradient(idx, &mut p);
            let o = gf.node_hessian(idx);
            let r = st + hamiltonian(t_mid, &x, &p, &o);
            res[idx] = r;
            sup = sup.max(r.abs());
            l2 += r * r;
            count += 1;
        }
        slices.push(res);
    }
    let l2 = if count > 0 {
        (l2 / count as f64).sqrt()
    } else {
        0.0
    };
    ResidualReport {
        sup,
        l2,
        field: TimeField {
            grid: grid.clone(),
            tgrid: TimeGrid::new(s.tgrid.t0, s.tgrid.t1, s.tgrid.steps),
            slices,
        },
    }
}

/// Born-formula marginal `mu_t = u(t,.) v(t,.)`, normalized.
pub fn born_marginal(u: &TimeField, v_dual: &TimeField, k: usize) -> Result<GridFunction> {
    if u.grid.node_count() != v_dual.grid.node_count() {
        return Err(CoreError::Shape(
            "u and v live on different grids".into(),
        ));
    }
    let mut out = GridFunction {
        grid: u.grid.clone(),
        values: u.slices[k]
            .iter()
            .zip(&v_dual.slices[k])
            .map(|(a, b)| a * b)
            .collect(),
    };
    out.normalize()
        .map_err(|_| CoreError::Numeric("Born marginal has nonpositive mass".into()))?;
    Ok(out)
}

/// Mean and variance of a (1D) grid density.
pub fn density_moments_1d(mu: &GridFunction) -> (f64, f64) {
    let mut x = [0.0];
    let mut mass = 0.0;
    let mut mean = 0.0;
    for idx in 0..mu.grid.node_count() {
        mu.grid.node_coord(idx, &mut x);
        let w = mu.grid.node_weight(idx) * mu.values[idx];
        mass += w;
        mean += w * x[0];
    }
    mean /= mass;
    let mut var = 0.0;
    for idx in 0..mu.grid.node_count() {
        mu.grid.node_coord(idx, &mut x);
        let w = mu.grid.node_weight(idx) * mu.values[idx];
        var += w * (x[0] - mean) * (x[0] - mean);
    }
    (mean, var / mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn gaussian_density(x: f64, var: f64) -> f64 {
        (-(x * x) / (2.0 * var)).exp() / (TAU * var).sqrt()
    }

    #[test]
    fn backward_heat_matches_kernel_convolution() {
        // u_T Gaussian of variance s^2 -> u(t) Gaussian of variance s^2 + (T - t)
        let s2 = 0.09;
        let grid = SpaceGrid::line(-8.0, 8.0, 256);
        let u_t = GridFunction::from_fn(&grid, |x| gaussian_density(x[0], s2));
        let tgrid = TimeGrid::new(0.0, 1.0, 128);
        let (u, diag) = solve_backward(&BackwardProblem::heat(), &u_t, tgrid).unwrap();
        assert!(diag.m_matrix);
        let mut x = [0.0];
        let mut sup = 0.0f64;
        for idx in 0..grid.node_count() {
            grid.node_coord(idx, &mut x);
            let exact = gaussian_density(x[0], s2 + 1.0);
            sup = sup.max((u.slices[0][idx] - exact).abs());
        }
        // second-order scheme on a smooth profile
        assert!(sup < 2e-4, "sup {sup}");
    }

    #[test]
    fn backward_constants_are_invariant_and_potential_scales() {
        let grid = SpaceGrid::line(-2.0, 2.0, 64);
        let ones = GridFunction::constant(&grid, 1.0);
        let tgrid = TimeGrid::new(0.0, 1.0, 64);
        let (u, _) = solve_backward(&BackwardProblem::heat(), &ones, tgrid).unwrap();
        for s in &u.slices {
            for v in s {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
        // constant potential: u = e^{c (T - t)}
        let c = 0.37;
        let prob = BackwardProblem {
            drift: None,
            potential: Some(Arc::new(move |_t: f64, _x: &[f64]| c)),
            kappa: 1.0,
        };
        let (u, _) = solve_backward(&prob, &ones, tgrid).unwrap();
        for (k, s) in u.slices.iter().enumerate() {
            let exact = (c * (1.0 - tgrid.time(k))).exp();
            for v in s {
                assert!((v - exact).abs() < 1e-4, "level {k}: {v} vs {exact}");
            }
        }
    }

    #[test]
    fn backward_rejects_nonpositive_terminal() {
        let grid = SpaceGrid::line(-1.0, 1.0, 16);
        let bad = GridFunction::from_fn(&grid, |x| x[0]);
        let r = solve_backward(&BackwardProblem::heat(), &bad, TimeGrid::new(0.0, 1.0, 8));
        assert!(matches!(r, Err(CoreError::Positivity(_))));
    }

    #[test]
    fn forward_heat_spreads_gaussian() {
        let grid = SpaceGrid::line(-8.0, 8.0, 256);
        let mu0 = GridFunction::from_fn(&grid, |x| gaussian_density(x[0], 0.25));
        let tgrid = TimeGrid::new(0.0, 1.0, 128);
        let (mu, _) = solve_forward(&mu0, None, tgrid, 1.0).unwrap();
        let (mean, var) = density_moments_1d(&mu.slice(tgrid.steps));
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.25).abs() < 1e-3, "var {var}");
        // mass exactly one at every step (renormalized, drift recorded)
        for k in 0..=tgrid.steps {
            let m = mu.slice(k).integrate();
            assert!((m - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_uniform_on_circle_stays_uniform() {
        let grid = SpaceGrid::new(vec![Axis::periodic(0.0, TAU, 64)]).unwrap();
        let mu0 = GridFunction::constant(&grid, 1.0 / TAU);
        let vfield: VectorField = Arc::new(|_t, _x, out: &mut [f64]| out[0] = 0.0);
        let (mu, _) = solve_forward(&mu0, Some(vfield), TimeGrid::new(0.0, 1.0, 32), 1.0).unwrap();
        for s in &mu.slices {
            for v in s {
                assert!((v - 1.0 / TAU).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duality_of_backward_and_forward_on_circle() {
        // For b = 0, F = 0 on the circle, ∫ u(t,x) v(t,x) dx is constant.
        let grid = SpaceGrid::new(vec![Axis::periodic(0.0, TAU, 128)]).unwrap();
        let tgrid = TimeGrid::new(0.0, 1.0, 128);
        let u_t = GridFunction::from_fn(&grid, |x| 1.0 + 0.5 * x[0].sin() + 0.2 * (2.0 * x[0]).cos());
        let (u, _) = solve_backward(&BackwardProblem::heat(), &u_t, tgrid).unwrap();
        let mut v0 = GridFunction::from_fn(&grid, |x| 1.0 + 0.3 * x[0].cos());
        v0.normalize().unwrap();
        let (v, _) = solve_forward(&v0, None, tgrid, 1.0).unwrap();
        let pairing = |k: usize| -> f64 {
            (0..grid.node_count())
                .map(|i| u.slices[k][i] * v.slices[k][i] * grid.node_weight(i))
                .sum()
        };
        let p0 = pairing(0);
        for k in 0..=tgrid.steps {
            assert!((pairing(k) - p0).abs() < 1e-6, "level {k}");
        }
    }

    #[test]
    fn hjb_residual_vanishes_for_constant_s() {
        let grid = SpaceGrid::line(-3.0, 3.0, 64);
        let tgrid = TimeGrid::new(0.0, 1.0, 32);
        let slices = vec![vec![4.2; grid.node_count()]; tgrid.steps + 1];
        let s = TimeField {
            grid,
            tgrid,
            slices,
        };
        // H with F = 0: quadratic in p plus half trace of o
        let ham = |_t: f64, _x: &[f64], p: &[f64], o: &SymMat| {
            0.5 * p[0] * p[0] + 0.5 * o.get(0, 0)
        };
        let rep = hjb_residual(&s, &ham, None);
        assert!(rep.sup < 1e-14);
    }

    #[test]
    fn hjb_residual_brownian_bridge_gradient() {
        // S from the free backward-heat solution to a narrow Gaussian at q2:
        // ∇S = (q2 - x)/(T - t + w^2) exactly; check residual smallness and
        // the gradient against the closed form.
        let grid = SpaceGrid::line(-4.0, 4.0, 512);
        let tgrid = TimeGrid::new(0.0, 1.0, 512);
        let w2 = (2.0 * grid.axes[0].dx()).powi(2);
        let floor = 1e-12 * gaussian_density(0.0, w2);
        let u_t = GridFunction::from_fn(&grid, |x| gaussian_density(x[0], w2) + floor);
        let (u, _) = solve_backward(&BackwardProblem::heat(), &u_t, tgrid).unwrap();
        let s = hjb_from_u(&u, 1.0).unwrap();
        // check ∇S at t = 0.5 on the bulk
        let k = 256;
        let gf = s.slice(k);
        let mut x = [0.0];
        let mut g = [0.0];
        let mut worst = 0.0f64;
        for idx in 0..grid.node_count() {
            grid.node_coord(idx, &mut x);
            if x[0].abs() > 2.0 {
                continue;
            }
            gf.node_gradient(idx, &mut g);
            let exact = -x[0] / (1.0 - tgrid.time(k) + w2);
            worst = worst.max((g[0] - exact).abs());
        }
        assert!(worst < 2e-3, "gradient error {worst}");
        let ham = |_t: f64, _x: &[f64], p: &[f64], o: &SymMat| {
            0.5 * p[0] * p[0] + 0.5 * o.get(0, 0)
        };
        let rep = hjb_residual(
            &s,
            &ham,
            Some(&|t: f64, x: &[f64]| t <= 0.9 && x[0].abs() <= 1.0),
        );
        assert!(rep.sup < 0.05, "residual sup {}", rep.sup);
    }

    #[test]
    fn born_marginal_brownian_bridge_variance() {
        let grid = SpaceGrid::line(-4.0, 4.0, 512);
        let tgrid = TimeGrid::new(0.0, 1.0, 512);
        let w = 2.0 * grid.axes[0].dx();
        let floor = 1e-12 * gaussian_density(0.0, w * w);
        let u_t = GridFunction::from_fn(&grid, |x| gaussian_density(x[0], w * w) + floor);
        let (u, _) = solve_backward(&BackwardProblem::heat(), &u_t, tgrid).unwrap();
        // v(0) = mu0 / u(0) with mu0 a narrow Gaussian at the start point
        let mu0 = GridFunction::from_fn(&grid, |x| gaussian_density(x[0], w * w));
        let u0 = u.slice(0);
        let mut v0 = GridFunction {
            grid: grid.clone(),
            values: mu0
                .values
                .iter()
                .zip(&u0.values)
                .map(|(m, uu)| m / uu)
                .collect(),
        };
        v0.normalize().unwrap();
        let (v, _) = solve_forward(&v0, None, tgrid, 1.0).unwrap();
        for (frac, t) in [(128usize, 0.25f64), (256, 0.5), (384, 0.75)] {
            let mu = born_marginal(&u, &v, frac).unwrap();
            let (_, var) = density_moments_1d(&mu);
            let expect = t * (1.0 - t);
            assert!(
                (var - expect).abs() < 0.05 * expect,
                "t={t}: var {var} vs {expect}"
            );
        }
        // t -> 0 concentrates at the start
        let mu_near0 = born_marginal(&u, &v, 0).unwrap();
        let (_, var0) = density_moments_1d(&mu_near0);
        assert!(var0 < 2.5 * w * w, "var0 {var0} vs width^2 {}", w * w);
    }

    #[test]
    fn born_marginal_uniform_circle() {
        let grid = SpaceGrid::new(vec![Axis::periodic(0.0, TAU, 32)]).unwrap();
        let tgrid = TimeGrid::new(0.0, 1.0, 16);
        let ones = TimeField {
            grid: grid.clone(),
            tgrid,
            slices: vec![vec![1.0; grid.node_count()]; tgrid.steps + 1],
        };
        let mu = born_marginal(&ones, &ones, 7).unwrap();
        for v in &mu.values {
            assert!((v - 1.0 / TAU).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_2d_heat_gaussian() {
        let grid = SpaceGrid::new(vec![
            Axis::bounded(-6.0, 6.0, 96),
            Axis::bounded(-6.0, 6.0, 96),
        ])
        .unwrap();
        let s2 = 0.25;
        let u_t = GridFunction::from_fn(&grid, |x| {
            gaussian_density(x[0], s2) * gaussian_density(x[1], s2)
        });
        let tgrid = TimeGrid::new(0.0, 0.5, 64);
        let (u, _) = solve_backward(&BackwardProblem::heat(), &u_t, tgrid).unwrap();
        let mut x = [0.0, 0.0];
        let mut sup = 0.0f64;
        for idx in 0..grid.node_count() {
            grid.node_coord(idx, &mut x);
            let exact = gaussian_density(x[0], s2 + 0.5) * gaussian_density(x[1], s2 + 0.5);
            sup = sup.max((u.slices[0][idx] - exact).abs());
        }
        assert!(sup < 2e-3, "sup {sup}");
    }

    #[test]
    fn spatial_order_is_second() {
        // empirical order on the smooth backward heat case must be ~2
        let err_for = |cells: usize| -> f64 {
            let grid = SpaceGrid::line(-8.0, 8.0, cells);
            let u_t = GridFunction::from_fn(&grid, |x| gaussian_density(x[0], 0.09));
            let tgrid = TimeGrid::new(0.0, 1.0, 2 * cells);
            let (u, _) = solve_backward(&BackwardProblem::heat(), &u_t, tgrid).unwrap();
            let mut x = [0.0];
            let mut sup = 0.0f64;
            for idx in 0..grid.node_count() {
                grid.node_coord(idx, &mut x);
                sup = sup.max((u.slices[0][idx] - gaussian_density(x[0], 1.09)).abs());
            }
            sup
        };
        let e1 = err_for(128);
        let e2 = err_for(256);
        let order = (e1 / e2).log2();
        assert!((1.7..=2.3).contains(&order), "order {order}");
    }
}
