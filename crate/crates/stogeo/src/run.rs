//! Command dispatch: builds core objects from a validated configuration,
//! runs the requested pipeline, writes CSV outputs and a `run.json` summary,
//! and maps outcomes to exit codes (0 tolerances pass, 1 a tolerance failed,
//! 2 configuration error, 3 numerical error).

use crate::config::{Command, GridConfig, RunConfig};
use crate::expr::Expr;
use serde_json::json;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use stogeo_core::diffusion::{
    estimate_mean_derivatives, generator_residual, integrate_sde, DiffusionCoeff, DiffusionSpec,
    EvalGrid, InitialCondition, SimGrid,
};
use stogeo_core::fields::{ScalarField, VectorField};
use stogeo_core::geometry::ManifoldModel;
use stogeo_core::linalg::SymMat;
use stogeo_core::mechanics::canonical::{
    check_linear_potential_transform, check_oscillator_transform, check_time_change_transform,
};
use stogeo_core::mechanics::{
    bernstein_bridge, endpoint_surrogate, energy_conservation_check, noether_residual,
    stochastic_hamilton_run, NoetherData, SimOptions,
};
use stogeo_core::pde::{
    hjb_residual, Axis, GridFunction, SpaceGrid, TimeGrid,
};
use stogeo_core::secondorder::{
    canonical_lift, legendre, legendre_inverse, ClassicalHamiltonian, Lagrangian,
};
use stogeo_core::symmetry::{classify, ProjectableVectorField, SampleLattice, SdeFields};
use stogeo_core::transport::{parallel_transport, riemannian_norm, Variance};
use stogeo_core::CoreError;

pub struct RunOutcome {
    pub exit_code: i32,
}

struct Summary {
    residuals: BTreeMap<String, f64>,
    outputs: Vec<String>,
    notes: Vec<String>,
}

impl Summary {
    fn new() -> Self {
        Summary {
            residuals: BTreeMap::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn put(&mut self, key: &str, value: f64) {
        self.residuals.insert(key.to_string(), value);
    }
}

fn build_model(cfg: &RunConfig) -> Result<Arc<ManifoldModel>, CoreError> {
    let id = cfg.model_id.as_str();
    if let Some(d) = id.strip_prefix("euclidean:") {
        let d: usize = d.parse().unwrap();
        return Ok(Arc::new(ManifoldModel::euclidean(d)));
    }
    if id == "circle" {
        return Ok(Arc::new(ManifoldModel::circle()));
    }
    if let Some(d) = id.strip_prefix("torus:") {
        let d: usize = d.parse().unwrap();
        return Ok(Arc::new(ManifoldModel::torus(d)));
    }
    if id == "sphere2" {
        return Ok(Arc::new(ManifoldModel::sphere2()));
    }
    if let Some(e) = id.strip_prefix("conformal1d:") {
        let expr = crate::expr::parse(e, 1)
            .map_err(|err| CoreError::Precondition(format!("conformal factor: {err}")))?;
        return Ok(Arc::new(ManifoldModel::conformal(
            1,
            e,
            Arc::new(move |x: &[f64]| expr.eval(0.0, x)),
        )));
    }
    Err(CoreError::Precondition(format!("unknown model {id}")))
}

fn drift_field(exprs: &[Expr]) -> VectorField {
    let exprs = exprs.to_vec();
    Arc::new(move |t: f64, x: &[f64], out: &mut [f64]| {
        for (i, e) in exprs.iter().enumerate() {
            out[i] = e.eval(t, x);
        }
    })
}

fn scalar_field(e: &Expr) -> ScalarField {
    let e = e.clone();
    Arc::new(move |t: f64, x: &[f64]| e.eval(t, x))
}

fn space_grid(g: &GridConfig) -> Result<Arc<SpaceGrid>, CoreError> {
    let axes: Vec<Axis> = (0..g.min.len())
        .map(|i| Axis {
            min: g.min[i],
            max: g.max[i],
            cells: g.cells[i],
            periodic: g.periodic.get(i).copied().unwrap_or(false),
        })
        .collect();
    SpaceGrid::new(axes)
}

fn diffusion_spec(cfg: &RunConfig, model: &Arc<ManifoldModel>) -> DiffusionSpec {
    let drift = match &cfg.drift {
        Some(exprs) => drift_field(exprs),
        None => stogeo_core::fields::zero_vector(),
    };
    let diffusion = match &cfg.sigma2 {
        Some(rows) => {
            let rows = rows.clone();
            let d = model.dim();
            DiffusionCoeff::Field(Arc::new(move |t: f64, x: &[f64]| {
                let mut m = SymMat::zeros(d);
                for i in 0..d {
                    for j in 0..d {
                        let v = rows[i][j].eval(t, x);
                        m.data[i * d + j] = v;
                    }
                }
                // symmetrize defensively
                for i in 0..d {
                    for j in (i + 1)..d {
                        let s = 0.5 * (m.get(i, j) + m.get(j, i));
                        m.set(i, j, s);
                    }
                }
                m
            }))
        }
        None => DiffusionCoeff::InverseMetric { scale: cfg.epsilon },
    };
    DiffusionSpec {
        model: model.clone(),
        drift,
        diffusion,
        label: format!("cli:{}", cfg.model_id),
    }
}

fn initial_condition(cfg: &RunConfig, model: &ManifoldModel) -> Result<InitialCondition, CoreError> {
    let center = cfg
        .mu0_center
        .clone()
        .unwrap_or_else(|| vec![0.0; model.dim()]);
    if center.len() != model.dim() {
        return Err(CoreError::Shape("mu0_center has wrong dimension".into()));
    }
    Ok(match cfg.mu0_std {
        Some(s) if s > 0.0 => InitialCondition::Gaussian { center, std: s },
        _ => InitialCondition::Point(center),
    })
}

fn sim_grid(cfg: &RunConfig) -> Result<SimGrid, CoreError> {
    let (t0, t1, steps_default) = match &cfg.grid {
        Some(g) => (g.t0, g.t1, g.steps),
        None => (0.0, cfg.sim_t_end.unwrap_or(1.0), 128),
    };
    let t_end = cfg.sim_t_end.unwrap_or(t1);
    let dt = cfg.dt.unwrap_or((t1 - t0) / steps_default as f64);
    let steps = ((t_end - t0) / dt).round().max(1.0) as usize;
    Ok(SimGrid::new(t0, dt, steps))
}

/// Tolerance gate: every configured tolerance key must match a computed
/// residual and hold; missing keys are configuration errors.
fn apply_tolerances(
    cfg: &RunConfig,
    summary: &Summary,
    defaults: &[(&str, f64)],
) -> Result<(BTreeMap<String, f64>, bool), String> {
    let mut tols: BTreeMap<String, f64> = defaults
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
    for (k, v) in &cfg.tolerances {
        tols.insert(k.clone(), *v);
    }
    let mut pass = true;
    for (k, bound) in &tols {
        match summary.residuals.get(k) {
            Some(v) => {
                if v.abs() > *bound {
                    pass = false;
                }
            }
            None => {
                return Err(format!(
                    "tolerance `{k}` does not match any computed residual ({:?})",
                    summary.residuals.keys().collect::<Vec<_>>()
                ))
            }
        }
    }
    Ok((tols, pass))
}

fn write_file(out_dir: &Path, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(name), bytes)
}

/// JSON header describing the grid geometry of an exported field CSV.
fn write_grid_header(
    out_dir: &Path,
    name: &str,
    grid: &SpaceGrid,
    tgrid: &TimeGrid,
) -> std::io::Result<()> {
    let axes: Vec<serde_json::Value> = grid
        .axes
        .iter()
        .map(|a| {
            json!({
                "min": a.min,
                "max": a.max,
                "cells": a.cells,
                "periodic": a.periodic,
            })
        })
        .collect();
    let doc = json!({
        "axes": axes,
        "t0": tgrid.t0,
        "t1": tgrid.t1,
        "steps": tgrid.steps,
        "layout": "t,x0[,x1],value rows, axis 0 slowest",
    });
    write_file(out_dir, name, &serde_json::to_vec_pretty(&doc).unwrap_or_default())
}

pub fn dispatch(cfg: &RunConfig, out_dir: &Path) -> RunOutcome {
    let result = run_command(cfg, out_dir);
    match result {
        Ok(code) => RunOutcome { exit_code: code },
        Err(e) => {
            eprintln!("numerical error: {e}");
            RunOutcome { exit_code: 3 }
        }
    }
}

fn run_command(cfg: &RunConfig, out_dir: &Path) -> Result<i32, CoreError> {
    let mut summary = Summary::new();
    let io_err = |e: std::io::Error| CoreError::Numeric(format!("io: {e}"));

    let defaults: Vec<(&str, f64)> = match cfg.command {
        Command::Simulate => {
            let model = build_model(cfg)?;
            let spec = diffusion_spec(cfg, &model);
            let init = initial_condition(cfg, &model)?;
            let grid = sim_grid(cfg)?;
            let ens = integrate_sde(&spec, &init, grid, cfg.n_paths, cfg.seed)?;
            let mut csv = Vec::new();
            ens.write_csv(&mut csv).map_err(io_err)?;
            write_file(out_dir, "ensemble.csv", &csv).map_err(io_err)?;
            let mut bin = Vec::new();
            ens.write_binary(&mut bin).map_err(io_err)?;
            write_file(out_dir, "ensemble.bin", &bin).map_err(io_err)?;
            summary.outputs.push("ensemble.csv".into());
            summary.outputs.push("ensemble.bin".into());
            summary.put("killed_fraction", ens.killed_fraction);
            vec![("killed_fraction", 0.5)]
        }
        Command::MeanDerivatives => {
            let model = build_model(cfg)?;
            let spec = diffusion_spec(cfg, &model);
            let init = initial_condition(cfg, &model)?;
            let grid = sim_grid(cfg)?;
            let ens = integrate_sde(&spec, &init, grid, cfg.n_paths, cfg.seed)?;
            let ev = cfg.eval.as_ref().ok_or_else(|| {
                CoreError::Precondition("mean-derivatives needs an `eval` block".into())
            })?;
            let eval = EvalGrid {
                axes: (0..ev.min.len())
                    .map(|i| (ev.min[i], ev.max[i], ev.points))
                    .collect(),
            };
            let field = estimate_mean_derivatives(&ens, ev.t_index, &eval, None)?;
            let d = field.dim;
            let mut csv = Vec::new();
            write!(csv, "cell").map_err(io_err)?;
            for i in 0..d {
                write!(csv, ",x{i}").map_err(io_err)?;
            }
            for i in 0..d {
                write!(csv, ",dx{i}").map_err(io_err)?;
            }
            for i in 0..d {
                for j in 0..d {
                    write!(csv, ",qx{i}{j}").map_err(io_err)?;
                }
            }
            for i in 0..d {
                write!(csv, ",dnx{i}").map_err(io_err)?;
            }
            writeln!(csv, ",ess,masked").map_err(io_err)?;
            let mut xc = vec![0.0; d];
            for c in 0..eval.len() {
                field.eval.coord(c, &mut xc);
                write!(csv, "{c}").map_err(io_err)?;
                for v in &xc {
                    write!(csv, ",{v:.16e}").map_err(io_err)?;
                }
                for v in field.dx_at(c) {
                    write!(csv, ",{v:.16e}").map_err(io_err)?;
                }
                for i in 0..d {
                    for j in 0..d {
                        write!(csv, ",{:.16e}", field.qx[c].get(i, j)).map_err(io_err)?;
                    }
                }
                for v in field.dnx_at(c) {
                    write!(csv, ",{v:.16e}").map_err(io_err)?;
                }
                writeln!(csv, ",{:.16e},{}", field.ess[c], u8::from(field.masked[c]))
                    .map_err(io_err)?;
            }
            write_file(out_dir, "mean_derivatives.csv", &csv).map_err(io_err)?;
            summary.outputs.push("mean_derivatives.csv".into());
            let resid = generator_residual(&ens, &spec, ev.t_index, &eval)?;
            summary.put("dx_sup", resid.dx_sup);
            summary.put("qx_sup", resid.qx_sup);
            summary.put("dx_se_ratio", resid.dx_sigma_ratio);
            summary.put("min_ess", resid.min_ess);
            vec![("dx_se_ratio", 5.0)]
        }
        Command::Bridge | Command::Hamilton => run_bridge_like(cfg, out_dir, &mut summary)?,
        Command::Hjb => {
            let model = build_model(cfg)?;
            let g = cfg
                .grid
                .as_ref()
                .ok_or_else(|| CoreError::Precondition("hjb needs a `grid` block".into()))?;
            let grid = space_grid(g)?;
            let tgrid = TimeGrid::new(g.t0, g.t1, g.steps);
            let (b, f) = hamiltonian_fields(cfg)?;
            let u_t = terminal_data(cfg, &grid)?;
            let prob = stogeo_core::pde::BackwardProblem {
                drift: b.clone(),
                potential: f.as_ref().map(|f| {
                    let f = f.clone();
                    let inv_eps = 1.0 / cfg.epsilon;
                    Arc::new(move |t: f64, x: &[f64]| f(t, x) * inv_eps) as ScalarField
                }),
                kappa: cfg.epsilon,
            };
            let (u, diag) = stogeo_core::pde::solve_backward(&prob, &u_t, tgrid)?;
            let s = stogeo_core::pde::hjb_from_u(&u, cfg.epsilon)?;
            let mut csv = Vec::new();
            s.write_csv(&mut csv).map_err(io_err)?;
            write_file(out_dir, "s.csv", &csv).map_err(io_err)?;
            write_grid_header(out_dir, "s_grid.json", &grid, &tgrid).map_err(io_err)?;
            summary.outputs.push("s.csv".into());
            summary.outputs.push("s_grid.json".into());
            let eps = cfg.epsilon;
            let d = model.dim();
            let bb = b.clone();
            let ff = f.clone();
            let ham = move |t: f64, x: &[f64], p: &[f64], o: &SymMat| -> f64 {
                let mut h = match &ff {
                    Some(f) => f(t, x),
                    None => 0.0,
                };
                let mut bv = vec![0.0; d];
                if let Some(b) = &bb {
                    b(t, x, &mut bv);
                }
                for i in 0..d {
                    h += 0.5 * p[i] * p[i] + bv[i] * p[i] + 0.5 * eps * o.get(i, i);
                }
                h
            };
            // exclude the locally first-order startup pair below t1 and
            // restrict to the region where u carries mass
            let cut = g.t1 - 2.5 * tgrid.dt();
            let peaks: Vec<f64> = u
                .slices
                .iter()
                .map(|sl| sl.iter().fold(0.0f64, |m, v| m.max(*v)))
                .collect();
            let u_mask = u.clone();
            let mask = move |t: f64, x: &[f64]| {
                if t > cut {
                    return false;
                }
                let k = (((t - u_mask.tgrid.t0) / u_mask.tgrid.dt()).floor() as usize)
                    .min(u_mask.tgrid.steps);
                u_mask.eval(t, x) >= 1e-2 * peaks[k]
            };
            let rep = hjb_residual(&s, &ham, Some(&mask));
            summary.put("hjb_sup", rep.sup);
            summary.put("hjb_l2", rep.l2);
            summary.put("m_matrix", if diag.m_matrix { 1.0 } else { 0.0 });
            vec![]
        }
        Command::Noether => {
            let model = build_model(cfg)?;
            let g = cfg
                .grid
                .as_ref()
                .ok_or_else(|| CoreError::Precondition("noether needs a `grid` block".into()))?;
            let grid = space_grid(g)?;
            let tgrid = TimeGrid::new(g.t0, g.t1, g.steps);
            let (b, f) = hamiltonian_fields(cfg)?;
            let u_t = terminal_data(cfg, &grid)?;
            let prob = stogeo_core::pde::BackwardProblem {
                drift: b.clone(),
                potential: f.as_ref().map(|f| {
                    let f = f.clone();
                    let inv_eps = 1.0 / cfg.epsilon;
                    Arc::new(move |t: f64, x: &[f64]| f(t, x) * inv_eps) as ScalarField
                }),
                kappa: cfg.epsilon,
            };
            let (u, _) = stogeo_core::pde::solve_backward(&prob, &u_t, tgrid)?;
            let s = stogeo_core::pde::hjb_from_u(&u, cfg.epsilon)?;
            let l0 = Lagrangian::Quadratic {
                model: model.clone(),
                b: b.clone().unwrap_or_else(stogeo_core::fields::zero_vector),
                f: f.clone().unwrap_or_else(stogeo_core::fields::zero_scalar),
            };
            let nd = NoetherData {
                v0: match &cfg.v0_expr {
                    Some(e) => {
                        let e = e.clone();
                        Arc::new(move |t| e.eval(t, &[]))
                    }
                    None => Arc::new(|_| 0.0),
                },
                v: match &cfg.v_expr {
                    Some(exprs) => drift_field(exprs),
                    None => stogeo_core::fields::zero_vector(),
                },
                phi: match &cfg.phi_expr {
                    Some(e) => scalar_field(e),
                    None => stogeo_core::fields::zero_scalar(),
                },
            };
            let precheck = cfg.tolerances.get("hjb_precheck").copied().unwrap_or(0.05);
            // central 60% of the box, away from the Neumann boundary layer,
            // and clear of the startup levels
            let cut = g.t1 - 2.5 * tgrid.dt();
            let lo: Vec<f64> = g.min.iter().zip(&g.max).map(|(a, b)| a + 0.2 * (b - a)).collect();
            let hi: Vec<f64> = g.min.iter().zip(&g.max).map(|(a, b)| b - 0.2 * (b - a)).collect();
            let mask = move |t: f64, x: &[f64]| {
                t <= cut && x.iter().enumerate().all(|(i, v)| *v >= lo[i] && *v <= hi[i])
            };
            let rep = noether_residual(&nd, &l0, &s, cfg.epsilon, precheck, Some(&mask))?;
            let mut csv = Vec::new();
            rep.charge.write_csv(&mut csv).map_err(io_err)?;
            write_file(out_dir, "charge.csv", &csv).map_err(io_err)?;
            let mut csv = Vec::new();
            rep.residual.write_csv(&mut csv).map_err(io_err)?;
            write_file(out_dir, "charge_residual.csv", &csv).map_err(io_err)?;
            summary.outputs.push("charge.csv".into());
            summary.outputs.push("charge_residual.csv".into());
            summary.put("noether_sup", rep.sup);
            summary.put("hjb_precheck", rep.hjb_precheck);
            vec![]
        }
        Command::Symmetry => {
            let model = build_model(cfg)?;
            let d = model.dim();
            let fields = SdeFields {
                bfrak: match &cfg.drift {
                    Some(exprs) => drift_field(exprs),
                    None => stogeo_core::fields::zero_vector(),
                },
                a: match &cfg.sigma2 {
                    Some(rows) => {
                        let rows = rows.clone();
                        Arc::new(move |t: f64, x: &[f64]| {
                            let mut m = SymMat::zeros(d);
                            for i in 0..d {
                                for j in i..d {
                                    let v = 0.5
                                        * (rows[i][j].eval(t, x) + rows[j][i].eval(t, x));
                                    m.set(i, j, v);
                                }
                            }
                            m
                        })
                    }
                    None => Arc::new(move |_t, _x| SymMat::identity(d)),
                },
                dim: d,
            };
            let mut vf = ProjectableVectorField::new(
                d,
                match &cfg.v0_expr {
                    Some(e) => {
                        let e = e.clone();
                        Arc::new(move |t| e.eval(t, &[]))
                    }
                    None => Arc::new(|_| 0.0),
                },
                match &cfg.v_expr {
                    Some(exprs) => drift_field(exprs),
                    None => stogeo_core::fields::zero_vector(),
                },
            );
            // exact derivatives from the expression tree
            if let Some(e) = &cfg.v0_expr {
                let de = e.diff(None);
                vf.v0_dot_fn = Some(Arc::new(move |t| de.eval(t, &[])));
            } else {
                vf.v0_dot_fn = Some(Arc::new(|_| 0.0));
            }
            if let Some(exprs) = &cfg.v_expr {
                let dt: Vec<Expr> = exprs.iter().map(|e| e.diff(None)).collect();
                vf.v_dt_fn = Some(Arc::new(move |t: f64, x: &[f64], out: &mut [f64]| {
                    for (i, e) in dt.iter().enumerate() {
                        out[i] = e.eval(t, x);
                    }
                }));
                let jac: Vec<Vec<Expr>> = (0..d)
                    .map(|j| exprs.iter().map(|e| e.diff(Some(j))).collect())
                    .collect();
                vf.v_jac_fn = Some(Arc::new(move |t: f64, x: &[f64], out: &mut [f64]| {
                    for (j, row) in jac.iter().enumerate() {
                        for (i, e) in row.iter().enumerate() {
                            out[j * d + i] = e.eval(t, x);
                        }
                    }
                }));
                let hess: Vec<Vec<Vec<Expr>>> = (0..d)
                    .map(|j| {
                        (0..d)
                            .map(|k| {
                                exprs
                                    .iter()
                                    .map(|e| e.diff(Some(j)).diff(Some(k)))
                                    .collect()
                            })
                            .collect()
                    })
                    .collect();
                vf.v_hess_fn = Some(Arc::new(move |t: f64, x: &[f64], out: &mut [f64]| {
                    for (j, plane) in hess.iter().enumerate() {
                        for (k, row) in plane.iter().enumerate() {
                            for (i, e) in row.iter().enumerate() {
                                out[(j * d + k) * d + i] = e.eval(t, x);
                            }
                        }
                    }
                }));
            } else {
                vf.v_dt_fn = Some(stogeo_core::fields::zero_vector());
            }
            let lat = cfg.lattice.as_ref().ok_or_else(|| {
                CoreError::Precondition("symmetry needs a `lattice` block".into())
            })?;
            let lattice = SampleLattice {
                boxes: (0..lat.min.len())
                    .map(|i| (lat.min[i], lat.max[i]))
                    .collect(),
                points_per_dim: lat.points,
                t_range: (lat.t0, lat.t1),
                t_points: lat.t_points,
            };
            let tol = cfg.tolerances.get("rel_tol").copied().unwrap_or(1e-8);
            let cls = classify(&vf, &fields, &lattice, tol)?;
            summary.put("r1_sup", cls.report.r1_sup);
            summary.put("r2_sup", cls.report.r2_sup);
            summary.put("r_max", cls.report.max_residual());
            summary.put("term_scale", cls.report.term_scale);
            summary.put("threshold", cls.tolerance_used);
            summary
                .notes
                .push(if cls.is_symmetry { "symmetry" } else { "not-symmetry" }.into());
            // exit code straight from the verdict
            write_summary(cfg, out_dir, &summary, cls.is_symmetry, &BTreeMap::new())?;
            return Ok(if cls.is_symmetry { 0 } else { 1 });
        }
        Command::Transport => {
            let model = build_model(cfg)?;
            let d = model.dim();
            let path_id = cfg
                .transport_path
                .clone()
                .unwrap_or_else(|| "brownian".into());
            let grid = sim_grid(cfg)?;
            let (times, pts) = if let Some(theta) = path_id.strip_prefix("latitude:") {
                let theta: f64 = theta
                    .parse()
                    .map_err(|_| CoreError::Precondition("bad latitude angle".into()))?;
                let steps = grid.steps;
                let times: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
                let mut pts = vec![0.0; (steps + 1) * 2];
                for k in 0..=steps {
                    pts[2 * k] = theta;
                    pts[2 * k + 1] = std::f64::consts::TAU * k as f64 / steps as f64;
                }
                (times, pts)
            } else {
                let spec = diffusion_spec(cfg, &model);
                let init = initial_condition(cfg, &model)?;
                let ens = integrate_sde(&spec, &init, grid, 1, cfg.seed)?;
                let pts: Vec<f64> = (0..ens.times.len())
                    .flat_map(|k| ens.point(0, k).to_vec())
                    .collect();
                (ens.times.clone(), pts)
            };
            let v0 = cfg
                .transport_v0
                .clone()
                .unwrap_or_else(|| vec![1.0; d]);
            let variance = match cfg.transport_variance.as_deref() {
                Some("covector") => Variance::Covector,
                _ => Variance::Vector,
            };
            let frame = match cfg.transport_kind.as_deref() {
                Some("damped") => {
                    let m2 = model.clone();
                    let q = move |_t: f64, x: &[f64]| {
                        m2.inverse_metric(x).unwrap_or_else(|_| SymMat::zeros(d))
                    };
                    stogeo_core::transport::damped_transport(
                        &model, &times, &pts, &q, &v0, variance,
                    )?
                }
                _ => parallel_transport(&model, &times, &pts, &v0, variance)?,
            };
            let mut csv = Vec::new();
            frame.write_csv(&model, &pts, &mut csv).map_err(io_err)?;
            write_file(out_dir, "frame.csv", &csv).map_err(io_err)?;
            summary.outputs.push("frame.csv".into());
            let n0 = riemannian_norm(&model, &pts[0..d], &v0, variance);
            let mut drift_max = 0.0f64;
            for k in 0..times.len() {
                let nk = riemannian_norm(&model, &pts[k * d..(k + 1) * d], frame.at(k), variance);
                drift_max = drift_max.max((nk - n0).abs());
            }
            summary.put("norm_drift", drift_max);
            summary.put(
                "aborted",
                if frame.aborted_at.is_some() { 1.0 } else { 0.0 },
            );
            vec![]
        }
        Command::Legendre => {
            let model = build_model(cfg)?;
            let (b, f) = hamiltonian_fields(cfg)?;
            let l0 = Lagrangian::Quadratic {
                model: model.clone(),
                b: b.unwrap_or_else(stogeo_core::fields::zero_vector),
                f: f.unwrap_or_else(stogeo_core::fields::zero_scalar),
            };
            let (t, x, xdot) = cfg.legendre_point.clone().ok_or_else(|| {
                CoreError::Precondition("legendre needs a `legendre` block".into())
            })?;
            let (p, h0) = legendre(&l0, t, &x, &xdot)?;
            let (xdot_back, l0_val) = legendre_inverse(&l0, t, &x, &p)?;
            let mut rt = 0.0f64;
            for i in 0..xdot.len() {
                rt = rt.max((xdot_back[i] - xdot[i]).abs());
            }
            summary.put("roundtrip", rt);
            summary.put("h0", h0);
            summary.put("l0", l0_val);
            for (i, v) in p.iter().enumerate() {
                summary.put(&format!("p{i}"), *v);
            }
            vec![("roundtrip", 1e-10)]
        }
        Command::CanonicalCheck => {
            let example = cfg
                .canonical_example
                .clone()
                .ok_or_else(|| CoreError::Precondition("canonical-check needs `canonical.example`".into()))?;
            let rep = match example.as_str() {
                "oscillator" => check_oscillator_transform(cfg.canonical_samples, cfg.seed),
                "linear-potential" => {
                    check_linear_potential_transform(cfg.canonical_samples, cfg.seed)
                }
                _ => check_time_change_transform(cfg.canonical_samples, cfg.seed),
            };
            for (name, v) in &rep.residuals {
                summary.put(&name.replace(' ', "_"), *v);
            }
            summary.put("r_max", rep.max_residual());
            summary.put("degenerate", if rep.degenerate { 1.0 } else { 0.0 });
            vec![("r_max", 1e-10)]
        }
    };

    let (tols, pass) = match apply_tolerances(cfg, &summary, &defaults) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("config error: {msg}");
            return Ok(2);
        }
    };
    write_summary(cfg, out_dir, &summary, pass, &tols)?;
    Ok(if pass { 0 } else { 1 })
}

/// Shared pipeline for `bridge` and `hamilton`.
fn run_bridge_like(
    cfg: &RunConfig,
    out_dir: &Path,
    summary: &mut Summary,
) -> Result<Vec<(&'static str, f64)>, CoreError> {
    let io_err = |e: std::io::Error| CoreError::Numeric(format!("io: {e}"));
    let model = build_model(cfg)?;
    let g = cfg
        .grid
        .as_ref()
        .ok_or_else(|| CoreError::Precondition("bridge needs a `grid` block".into()))?;
    let grid = space_grid(g)?;
    let tgrid = TimeGrid::new(g.t0, g.t1, g.steps);
    let (b, f) = hamiltonian_fields(cfg)?;
    let u_t = terminal_data(cfg, &grid)?;
    let init = initial_condition(cfg, &model)?;
    let mu0_density = match (&cfg.mu0_center, cfg.mu0_std) {
        (Some(c), Some(sd)) if sd > 0.0 => {
            let c = c.clone();
            Some(GridFunction::from_fn(&grid, move |x| {
                let mut q = 0.0;
                for i in 0..c.len() {
                    q += (x[i] - c[i]) * (x[i] - c[i]);
                }
                (-(q) / (2.0 * sd * sd)).exp()
            }))
        }
        _ => None,
    };
    let sim = SimOptions {
        n_paths: cfg.n_paths,
        seed: cfg.seed,
        dt: cfg.dt,
        t_end: cfg.sim_t_end,
    };

    let run = if cfg.command == Command::Hamilton {
        let h0 = ClassicalHamiltonian::Quadratic {
            model: model.clone(),
            b: b.clone().unwrap_or_else(stogeo_core::fields::zero_vector),
            f: f.clone().unwrap_or_else(stogeo_core::fields::zero_scalar),
        };
        let hbar = canonical_lift(h0, model.clone(), cfg.epsilon)?;
        let run = stochastic_hamilton_run(&hbar, init, mu0_density, &u_t, tgrid, sim)?;
        let rep = energy_conservation_check(&hbar, &run, 10)?;
        summary.put("energy_slope", rep.slope);
        summary.put("energy_slope_se", rep.slope_se);
        summary.put(
            "energy_slope_se_ratio",
            rep.slope.abs() / rep.slope_se.max(1e-300),
        );
        let mut csv = Vec::new();
        writeln!(csv, "t,mean_energy").map_err(io_err)?;
        for (t, m) in rep.times.iter().zip(&rep.means) {
            writeln!(csv, "{t:.16e},{m:.16e}").map_err(io_err)?;
        }
        write_file(out_dir, "energy.csv", &csv).map_err(io_err)?;
        summary.outputs.push("energy.csv".into());
        run.bridge
    } else {
        bernstein_bridge(
            model.clone(),
            b.clone(),
            f.clone(),
            init,
            mu0_density,
            &u_t,
            tgrid,
            cfg.epsilon,
            sim,
        )?
    };

    let mut csv = Vec::new();
    run.s.write_csv(&mut csv).map_err(io_err)?;
    write_file(out_dir, "s.csv", &csv).map_err(io_err)?;
    write_grid_header(out_dir, "s_grid.json", &grid, &tgrid).map_err(io_err)?;
    let mut csv = Vec::new();
    run.ensemble.write_csv(&mut csv).map_err(io_err)?;
    write_file(out_dir, "ensemble.csv", &csv).map_err(io_err)?;
    summary.outputs.push("s.csv".into());
    summary.outputs.push("s_grid.json".into());
    summary.outputs.push("ensemble.csv".into());

    // residual diagnostics on the interior away from the startup levels
    let eps = cfg.epsilon;
    let d = model.dim();
    let bb = b.clone();
    let ff = f.clone();
    let ham = move |t: f64, x: &[f64], p: &[f64], o: &SymMat| -> f64 {
        let mut h = match &ff {
            Some(f) => f(t, x),
            None => 0.0,
        };
        let mut bv = vec![0.0; d];
        if let Some(b) = &bb {
            b(t, x, &mut bv);
        }
        for i in 0..d {
            h += 0.5 * p[i] * p[i] + bv[i] * p[i] + 0.5 * eps * o.get(i, i);
        }
        h
    };
    // bulk diagnostics: endpoint surrogates make the residuals meaningless
    // next to the terminal spike, so the report covers the region where the
    // conditioned density u still carries mass, up to 90% of the time range
    let cut = g.t0 + 0.9 * (g.t1 - g.t0);
    let u_for_mask = run.u.clone();
    let peaks: Vec<f64> = u_for_mask
        .slices
        .iter()
        .map(|s| s.iter().fold(0.0f64, |m, v| m.max(*v)))
        .collect();
    let bulk = move |t: f64, x: &[f64]| {
        if t > cut {
            return false;
        }
        let k = (((t - u_for_mask.tgrid.t0) / u_for_mask.tgrid.dt()).floor() as usize)
            .min(u_for_mask.tgrid.steps);
        u_for_mask.eval(t, x) >= 1e-2 * peaks[k]
    };
    let rep = hjb_residual(&run.s, &ham, Some(&bulk));
    summary.put("hjb_sup", rep.sup);
    summary.put("hjb_l2", rep.l2);
    summary.put("maxwell", run.hf.maxwell_residual(Some(&bulk)));
    summary.put("killed_fraction", run.ensemble.killed_fraction);

    if let Some(v) = &run.v_dual {
        let mut csv = Vec::new();
        writeln!(csv, "t,mean,variance").map_err(io_err)?;
        for k in 0..=tgrid.steps {
            let mu = stogeo_core::pde::born_marginal(&run.u, v, k)?;
            let (mean, var) = stogeo_core::pde::density_moments_1d(&mu);
            writeln!(csv, "{:.16e},{mean:.16e},{var:.16e}", tgrid.time(k)).map_err(io_err)?;
        }
        write_file(out_dir, "born_marginals.csv", &csv).map_err(io_err)?;
        summary.outputs.push("born_marginals.csv".into());
    }
    Ok(vec![("killed_fraction", 0.5)])
}

/// Classical-family fields (b, F) from the `hamiltonian` id or raw fields.
fn hamiltonian_fields(
    cfg: &RunConfig,
) -> Result<(Option<VectorField>, Option<ScalarField>), CoreError> {
    match cfg.hamiltonian.as_deref() {
        Some("harmonic") => Ok((
            None,
            Some(Arc::new(|_t, x: &[f64]| {
                0.5 * x.iter().map(|v| v * v).sum::<f64>()
            })),
        )),
        Some("euclidean-harmonic") => Ok((
            None,
            Some(Arc::new(|_t, x: &[f64]| {
                -0.5 * x.iter().map(|v| v * v).sum::<f64>()
            })),
        )),
        Some("free") => Ok((None, None)),
        Some("quadratic") | None => Ok((
            cfg.drift.as_ref().map(|e| drift_field(e)),
            cfg.potential.as_ref().map(scalar_field),
        )),
        Some(other) => Err(CoreError::Precondition(format!(
            "unsupported hamiltonian {other}"
        ))),
    }
}

/// Terminal data `u(T, .) = exp(S_T)` from an expression or a narrow
/// Gaussian endpoint surrogate.
fn terminal_data(cfg: &RunConfig, grid: &Arc<SpaceGrid>) -> Result<GridFunction, CoreError> {
    if let Some(e) = &cfg.s_terminal {
        let e = e.clone();
        let eps = cfg.epsilon;
        let gf = GridFunction::from_fn(grid, move |x| (e.eval(0.0, x) / eps).exp());
        return Ok(gf);
    }
    let center = cfg
        .surrogate_center
        .clone()
        .unwrap_or_else(|| vec![0.0; grid.dim()]);
    let w = cfg.surrogate_width_cells.unwrap_or(2.0) * grid.axes[0].dx();
    Ok(endpoint_surrogate(grid, &center, w))
}

fn write_summary(
    cfg: &RunConfig,
    out_dir: &Path,
    summary: &Summary,
    pass: bool,
    tols: &BTreeMap<String, f64>,
) -> Result<(), CoreError> {
    let digest = stogeo_core::rng::fnv1a(cfg.raw.to_string().as_bytes());
    let doc = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "command": cfg.command,
        "config_digest": format!("{digest:016x}"),
        "seed": cfg.seed,
        "inputs": cfg.raw,
        "residuals": summary.residuals,
        "tolerances": tols,
        "notes": summary.notes,
        "outputs": summary.outputs,
        "pass": pass,
    });
    let bytes = serde_json::to_vec_pretty(&doc)
        .map_err(|e| CoreError::Numeric(format!("serialize run.json: {e}")))?;
    fs::create_dir_all(out_dir).map_err(|e| CoreError::Numeric(format!("io: {e}")))?;
    fs::write(out_dir.join("run.json"), bytes)
        .map_err(|e| CoreError::Numeric(format!("io: {e}")))?;
    Ok(())
}
