//! Stochastic parallel displacement and damped parallel displacement along
//! sampled paths, plus mean covariant derivatives of fields restricted on a
//! diffusion.
//!
//! The transport equations are Stratonovich; the scheme is a midpoint
//! predictor-corrector (Heun): predict with the connection at `X(t_k)`,
//! correct with the connection at the chart midpoint of the increment. The
//! damped variants add the Itô curvature drift `∓ 1/2 R(V, ∂_k) ∂_l Q^{kl} Δt`.

use crate::error::{CoreError, Result};
use crate::geometry::{idx3, idx4, ManifoldModel};
use crate::linalg::SymMat;
use std::io::Write;

/// Which object rides along the path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variance {
    Vector,
    Covector,
}

/// Transport flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Parallel,
    Damped,
}

/// A vector (or covector) transported along one sampled path.
pub struct TransportedFrame {
    pub times: Vec<f64>,
    pub dim: usize,
    /// Row-major `[step][component]`.
    pub values: Vec<f64>,
    pub kind: TransportKind,
    pub variance: Variance,
    /// Step at which transport was aborted (chart singularity), if any.
    pub aborted_at: Option<usize>,
}

impl TransportedFrame {
    pub fn at(&self, step: usize) -> &[f64] {
        &self.values[step * self.dim..(step + 1) * self.dim]
    }

    /// CSV rows `step,t,v0,...,v{d-1},norm` with the Riemannian norm taken
    /// along the supplied path.
    pub fn write_csv(
        &self,
        model: &ManifoldModel,
        points: &[f64],
        w: &mut dyn Write,
    ) -> std::io::Result<()> {
        write!(w, "step,t")?;
        for i in 0..self.dim {
            write!(w, ",v{i}")?;
        }
        writeln!(w, ",norm")?;
        for k in 0..self.times.len() {
            let x = &points[k * self.dim..(k + 1) * self.dim];
            let v = self.at(k);
            let norm = riemannian_norm(model, x, v, self.variance);
            write!(w, "{},{:.16e}", k, self.times[k])?;
            for vi in v {
                write!(w, ",{vi:.16e}")?;
            }
            writeln!(w, ",{norm:.16e}")?;
        }
        Ok(())
    }
}

pub fn riemannian_norm(model: &ManifoldModel, x: &[f64], v: &[f64], variance: Variance) -> f64 {
    match variance {
        Variance::Vector => model.metric(x).quad_form(v).max(0.0).sqrt(),
        Variance::Covector => model
            .inverse_metric(x)
            .map(|g| g.quad_form(v).max(0.0).sqrt())
            .unwrap_or(f64::NAN),
    }
}

/// Quadratic-variation field used by the damped drift, evaluated at `(t, x)`.
pub type QxField<'a> = &'a dyn Fn(f64, &[f64]) -> SymMat;

fn transport_impl(
    model: &ManifoldModel,
    times: &[f64],
    points: &[f64],
    v0: &[f64],
    variance: Variance,
    qx: Option<QxField>,
) -> Result<TransportedFrame> {
    let d = model.dim();
    if v0.len() != d {
        return Err(CoreError::Shape("initial frame has wrong dimension".into()));
    }
    let steps = times.len() - 1;
    let mut values = vec![0.0; times.len() * d];
    values[0..d].copy_from_slice(v0);
    let sign = match variance {
        Variance::Vector => -1.0,
        Variance::Covector => 1.0,
    };
    let mut aborted_at = None;
    let mut dx = vec![0.0; d];
    let mut v = v0.to_vec();
    for k in 0..steps {
        let x0 = &points[k * d..(k + 1) * d];
        let x1 = &points[(k + 1) * d..(k + 2) * d];
        model.coord_delta(x1, x0, &mut dx);
        let dt = times[k + 1] - times[k];
        // chart midpoint against the wrapped increment
        let mid: Vec<f64> = (0..d).map(|i| x0[i] + 0.5 * dx[i]).collect();
        let (gamma0, gamma_mid) = match (model.christoffel(x0), model.christoffel(&mid)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => {
                aborted_at = Some(k);
                break;
            }
        };
        // predictor with Γ(x0)
        let mut incr = vec![0.0; d];
        connection_increment(d, &gamma0, &v, &dx, sign, &mut incr, variance);
        let v_pred: Vec<f64> = (0..d).map(|i| v[i] + incr[i]).collect();
        // corrector with Γ(midpoint) against the average frame
        let v_avg: Vec<f64> = (0..d).map(|i| 0.5 * (v[i] + v_pred[i])).collect();
        connection_increment(d, &gamma_mid, &v_avg, &dx, sign, &mut incr, variance);
        let mut v_new: Vec<f64> = (0..d).map(|i| v[i] + incr[i]).collect();
        // damped variants add the Itô curvature drift at (t_k, x0)
        if let Some(q) = qx {
            let (riem, _) = model.curvature(x0)?;
            let qm = q(times[k], x0);
            match variance {
                Variance::Vector => {
                    // dV^i += -1/2 Q^{kl} [R(V, ∂_k) ∂_l]^i dt
                    for i in 0..d {
                        let mut damp = 0.0;
                        for kk in 0..d {
                            for l in 0..d {
                                for j in 0..d {
                                    damp += qm.get(kk, l) * v[j] * riem[idx4(d, i, l, j, kk)];
                                }
                            }
                        }
                        v_new[i] -= 0.5 * damp * dt;
                    }
                }
                Variance::Covector => {
                    // dη_j += +1/2 Q^{kl} η_i [R(∂_j, ∂_k) ∂_l]^i dt
                    for j in 0..d {
                        let mut damp = 0.0;
                        for kk in 0..d {
                            for l in 0..d {
                                for i in 0..d {
                                    damp += qm.get(kk, l) * v[i] * riem[idx4(d, i, l, j, kk)];
                                }
                            }
                        }
                        v_new[j] += 0.5 * damp * dt;
                    }
                }
            }
        }
        v = v_new;
        values[(k + 1) * d..(k + 2) * d].copy_from_slice(&v);
    }
    if let Some(k) = aborted_at {
        for kk in k..steps {
            let src = values[kk * d..(kk + 1) * d].to_vec();
            values[(kk + 1) * d..(kk + 2) * d].copy_from_slice(&src);
        }
    }
    Ok(TransportedFrame {
        times: times.to_vec(),
        dim: d,
        values,
        kind: if qx.is_some() {
            TransportKind::Damped
        } else {
            TransportKind::Parallel
        },
        variance,
        aborted_at,
    })
}

/// Connection increment of one transport step:
/// vectors get `-Γ^i_{jk} V^j ΔX^k`, covectors `+Γ^i_{jk} η_i ΔX^k`.
#[inline]
fn connection_increment(
    d: usize,
    gamma: &[f64],
    frame: &[f64],
    dx: &[f64],
    sign: f64,
    out: &mut [f64],
    variance: Variance,
) {
    match variance {
        Variance::Vector => {
            for i in 0..d {
                let mut s = 0.0;
                for j in 0..d {
                    for k in 0..d {
                        s += gamma[idx3(d, i, j, k)] * frame[j] * dx[k];
                    }
                }
                out[i] = sign * s;
            }
        }
        Variance::Covector => {
            for j in 0..d {
                let mut s = 0.0;
                for i in 0..d {
                    for k in 0..d {
                        s += gamma[idx3(d, i, j, k)] * frame[i] * dx[k];
                    }
                }
                out[j] = sign * s;
            }
        }
    }
}

/// Stochastic parallel displacement of `v0` along a sampled path
/// (`covector` flips the sign of the connection term).
pub fn parallel_transport(
    model: &ManifoldModel,
    times: &[f64],
    points: &[f64],
    v0: &[f64],
    variance: Variance,
) -> Result<TransportedFrame> {
    transport_impl(model, times, points, v0, variance, None)
}

/// Damped parallel displacement: the parallel scheme plus the curvature
/// drift against the quadratic-variation field.
pub fn damped_transport(
    model: &ManifoldModel,
    times: &[f64],
    points: &[f64],
    qx: QxField,
    v0: &[f64],
    variance: Variance,
) -> Result<TransportedFrame> {
    transport_impl(model, times, points, v0, variance, Some(qx))
}

/// Damped mean covariant derivative of a time-dependent 1-form restricted
/// on a diffusion:
/// `∂_t η + ∇_{D_∇X} η + 1/2 Q^{ij} (∇²_{∂i,∂j} η - R(η, ∂_j) ∂_i)`,
/// evaluated pointwise with analytic callbacks for the form.
///
/// `eta(t, x, out)` fills the components; derivatives are taken by central
/// differences with steps `h_t`, `h_x`.
#[allow(clippy::too_many_arguments)]
pub fn damped_mean_cov_derivative(
    model: &ManifoldModel,
    eta: &dyn Fn(f64, &[f64], &mut [f64]),
    dnx: &dyn Fn(f64, &[f64], &mut [f64]),
    qx: QxField,
    t: f64,
    x: &[f64],
    h_t: f64,
    h_x: f64,
) -> Result<Vec<f64>> {
    let d = model.dim();
    let gamma = model.christoffel(x)?;
    let dgamma = model.christoffel_partial(x)?;
    let (riem, _) = model.curvature(x)?;
    let q = qx(t, x);
    let ginv = model.inverse_metric(x)?;
    let g = model.metric(x);

    let mut eta0 = vec![0.0; d];
    eta(t, x, &mut eta0);

    // ∂_t η
    let mut etp = vec![0.0; d];
    let mut etm = vec![0.0; d];
    eta(t + h_t, x, &mut etp);
    eta(t - h_t, x, &mut etm);
    let dt_eta: Vec<f64> = (0..d).map(|i| (etp[i] - etm[i]) / (2.0 * h_t)).collect();

    // first and second coordinate partials of η at fixed t
    let mut d_eta = vec![0.0; d * d]; // d_eta[(j, k)] = ∂_j η_k
    let mut dd_eta = vec![0.0; d * d * d]; // dd_eta[(i, j, k)] = ∂_i ∂_j η_k
    let mut xs = x.to_vec();
    let mut buf_p = vec![0.0; d];
    let mut buf_m = vec![0.0; d];
    for j in 0..d {
        let x0 = xs[j];
        xs[j] = x0 + h_x;
        eta(t, &xs, &mut buf_p);
        xs[j] = x0 - h_x;
        eta(t, &xs, &mut buf_m);
        xs[j] = x0;
        for k in 0..d {
            d_eta[j * d + k] = (buf_p[k] - buf_m[k]) / (2.0 * h_x);
            dd_eta[idx3(d, j, j, k)] = (buf_p[k] - 2.0 * eta0[k] + buf_m[k]) / (h_x * h_x);
        }
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let (xi, xj) = (xs[i], xs[j]);
            let mut quad = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
            for (q_idx, (si, sj)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
                .iter()
                .enumerate()
            {
                xs[i] = xi + si * h_x;
                xs[j] = xj + sj * h_x;
                eta(t, &xs, &mut quad[q_idx]);
            }
            xs[i] = xi;
            xs[j] = xj;
            for k in 0..d {
                let v = (quad[0][k] - quad[1][k] - quad[2][k] + quad[3][k]) / (4.0 * h_x * h_x);
                dd_eta[idx3(d, i, j, k)] = v;
                dd_eta[idx3(d, j, i, k)] = v;
            }
        }
    }

    // covariant pieces
    let cov1 = |j: usize, k: usize, d_eta: &[f64], eta0: &[f64]| -> f64 {
        // (∇_j η)_k = ∂_j η_k - Γ^m_{jk} η_m
        let mut v = d_eta[j * d + k];
        for m in 0..d {
            v -= gamma[idx3(d, m, j, k)] * eta0[m];
        }
        v
    };

    let mut v_dnx = vec![0.0; d];
    dnx(t, x, &mut v_dnx);

    let mut out = vec![0.0; d];
    for k in 0..d {
        // ∇_{D∇X} η
        let mut adv = 0.0;
        for j in 0..d {
            adv += v_dnx[j] * cov1(j, k, &d_eta, &eta0);
        }
        // 1/2 Q^{ij} ∇²_{∂i,∂j} η
        let mut hess = 0.0;
        for i in 0..d {
            for j in 0..d {
                // (∇²_{i,j} η)_k = ∂_i (∇_j η)_k - Γ^m_{ij} (∇_m η)_k
                //                  - Γ^m_{ik} (∇_j η)_m
                let mut v = dd_eta[idx3(d, i, j, k)];
                for m in 0..d {
                    v -= dgamma[i * d * d * d + idx3(d, m, j, k)] * eta0[m]
                        + gamma[idx3(d, m, j, k)] * d_eta[i * d + m];
                    v -= gamma[idx3(d, m, i, j)] * cov1(m, k, &d_eta, &eta0);
                    v -= gamma[idx3(d, m, i, k)] * cov1(j, m, &d_eta, &eta0);
                }
                hess += q.get(i, j) * v;
            }
        }
        // -1/2 Q^{ij} [R(η, ∂_j) ∂_i]_k with η raised by the metric
        let mut curv = 0.0;
        for i in 0..d {
            for j in 0..d {
                // R(η^♯, ∂_j) ∂_i = (η^♯)^m R^a_{imj} ∂_a ; lower with g
                for m in 0..d {
                    for a in 0..d {
                        let eta_sharp_m: f64 =
                            (0..d).map(|l| ginv.get(m, l) * eta0[l]).sum();
                        curv += q.get(i, j)
                            * g.get(k, a)
                            * eta_sharp_m
                            * riem[idx4(d, a, i, m, j)];
                    }
                }
            }
        }
        out[k] = dt_eta[k] + adv + 0.5 * hess - 0.5 * curv;
    }
    Ok(out)
}
