//! Canonical-transformation checks through generating functions.
//!
//! The generating relations for a type-one function `G(x, y, t)` are
//! `p = ∂G/∂x`, `o = ∂²G/∂x²`, `P = -∂G/∂y`, `O = -∂²G/∂y²` and
//! `(K - 1) Ḟ⁰ - H + 1 = ∂G/∂t`; time-dependent point transformations are
//! checked in the stochastic-differential form by balancing the `∘dx` and
//! `dt` coefficients.

use crate::rng::{uniform, Stream};

/// Named sup-residuals of one transformation check.
#[derive(Debug, Clone)]
pub struct CanonicalReport {
    pub residuals: Vec<(String, f64)>,
    /// Set when `∂²G/∂x∂y` nearly vanishes at some sample (the generating
    /// function cannot couple the two charts there).
    pub degenerate: bool,
    pub samples: usize,
}

impl CanonicalReport {
    pub fn max_residual(&self) -> f64 {
        self.residuals
            .iter()
            .fold(0.0f64, |acc, (_, v)| acc.max(*v))
    }
}

const FD_H: f64 = 1e-3;

fn d_dx(f: &dyn Fn(f64, f64, f64) -> f64, x: f64, y: f64, t: f64) -> f64 {
    (-f(x + 2.0 * FD_H, y, t) + 8.0 * f(x + FD_H, y, t) - 8.0 * f(x - FD_H, y, t)
        + f(x - 2.0 * FD_H, y, t))
        / (12.0 * FD_H)
}

fn d_dy(f: &dyn Fn(f64, f64, f64) -> f64, x: f64, y: f64, t: f64) -> f64 {
    (-f(x, y + 2.0 * FD_H, t) + 8.0 * f(x, y + FD_H, t) - 8.0 * f(x, y - FD_H, t)
        + f(x, y - 2.0 * FD_H, t))
        / (12.0 * FD_H)
}

fn d2_dxx(f: &dyn Fn(f64, f64, f64) -> f64, x: f64, y: f64, t: f64) -> f64 {
    (-f(x + 2.0 * FD_H, y, t) + 16.0 * f(x + FD_H, y, t) - 30.0 * f(x, y, t)
        + 16.0 * f(x - FD_H, y, t)
        - f(x - 2.0 * FD_H, y, t))
        / (12.0 * FD_H * FD_H)
}

fn d2_dyy(f: &dyn Fn(f64, f64, f64) -> f64, x: f64, y: f64, t: f64) -> f64 {
    (-f(x, y + 2.0 * FD_H, t) + 16.0 * f(x, y + FD_H, t) - 30.0 * f(x, y, t)
        + 16.0 * f(x, y - FD_H, t)
        - f(x, y - 2.0 * FD_H, t))
        / (12.0 * FD_H * FD_H)
}

fn d2_dxy(f: &dyn Fn(f64, f64, f64) -> f64, x: f64, y: f64, t: f64) -> f64 {
    (f(x + FD_H, y + FD_H, t) - f(x + FD_H, y - FD_H, t) - f(x - FD_H, y + FD_H, t)
        + f(x - FD_H, y - FD_H, t))
        / (4.0 * FD_H * FD_H)
}

/// One phase-space sample `(x, p, o)` with its image `(y, P, O)` at time t.
#[derive(Debug, Clone, Copy)]
pub struct CanonicalSample {
    pub x: f64,
    pub p: f64,
    pub o: f64,
    pub y: f64,
    pub pp: f64,
    pub oo: f64,
    pub t: f64,
}

/// Analytic partial derivatives of a generating function.
pub struct GeneratingDerivatives<'a> {
    pub gx: &'a dyn Fn(f64, f64, f64) -> f64,
    pub gxx: &'a dyn Fn(f64, f64, f64) -> f64,
    pub gy: &'a dyn Fn(f64, f64, f64) -> f64,
    pub gyy: &'a dyn Fn(f64, f64, f64) -> f64,
    pub gxy: &'a dyn Fn(f64, f64, f64) -> f64,
}

/// Residuals of the four derivative relations over a set of samples whose
/// coordinates come from declared maps.
pub fn generating_relation_residuals_with(
    derivs: &GeneratingDerivatives,
    samples: &[CanonicalSample],
) -> CanonicalReport {
    let mut r_p = 0.0f64;
    let mut r_o = 0.0f64;
    let mut r_pp = 0.0f64;
    let mut r_oo = 0.0f64;
    let mut degenerate = false;
    for s in samples {
        r_p = r_p.max((s.p - (derivs.gx)(s.x, s.y, s.t)).abs());
        r_o = r_o.max((s.o - (derivs.gxx)(s.x, s.y, s.t)).abs());
        r_pp = r_pp.max((s.pp + (derivs.gy)(s.x, s.y, s.t)).abs());
        r_oo = r_oo.max((s.oo + (derivs.gyy)(s.x, s.y, s.t)).abs());
        if (derivs.gxy)(s.x, s.y, s.t).abs() < 1e-8 {
            degenerate = true;
        }
    }
    CanonicalReport {
        residuals: vec![
            ("p - Gx".into(), r_p),
            ("o - Gxx".into(), r_o),
            ("P + Gy".into(), r_pp),
            ("O + Gyy".into(), r_oo),
        ],
        degenerate,
        samples: samples.len(),
    }
}

/// Same residuals with all derivatives taken by fourth-order differences;
/// roundoff limits the attainable floor to about 1e-9.
pub fn generating_relation_residuals(
    g: &dyn Fn(f64, f64, f64) -> f64,
    samples: &[CanonicalSample],
) -> CanonicalReport {
    let derivs = GeneratingDerivatives {
        gx: &|x, y, t| d_dx(g, x, y, t),
        gxx: &|x, y, t| d2_dxx(g, x, y, t),
        gy: &|x, y, t| d_dy(g, x, y, t),
        gyy: &|x, y, t| d2_dyy(g, x, y, t),
        gxy: &|x, y, t| d2_dxy(g, x, y, t),
    };
    generating_relation_residuals_with(&derivs, samples)
}

/// Harmonic-oscillator transformation: `G = -x²/2 cot y` with
/// `x = (-2P)^{1/2} sin y`, `p = -(-2P)^{1/2} cos y`,
/// `o = (2P)^{-1} O cos²y - sin y cos y` and `O = -2P cot y`.
pub fn check_oscillator_transform(n: usize, seed: u64) -> CanonicalReport {
    let samples: Vec<CanonicalSample> = (0..n as u64)
        .map(|i| {
            let y = 0.3 + 0.9 * uniform(seed, Stream::Generic(70), i, 0, 0);
            let pp = -2.0 + 1.7 * uniform(seed, Stream::Generic(70), i, 1, 0);
            let oo = -2.0 * pp / y.tan();
            let x = (-2.0 * pp).sqrt() * y.sin();
            let p = -(-2.0 * pp).sqrt() * y.cos();
            let o = oo / (2.0 * pp) * y.cos() * y.cos() - y.sin() * y.cos();
            CanonicalSample {
                x,
                p,
                o,
                y,
                pp,
                oo,
                t: 0.0,
            }
        })
        .collect();
    let csc2 = |y: f64| 1.0 / (y.sin() * y.sin());
    let derivs = GeneratingDerivatives {
        gx: &|x, y, _| -x / y.tan(),
        gxx: &|_x, y, _| -1.0 / y.tan(),
        gy: &|x, y, _| 0.5 * x * x * csc2(y),
        gyy: &|x, y, _| -x * x * csc2(y) / y.tan(),
        gxy: &|x, y, _| x * csc2(y),
    };
    generating_relation_residuals_with(&derivs, &samples)
}

/// Time-dependent shift to a linear potential: `y = x + t²/2`, `P = p + t`,
/// `O = o`, generated by `G = -t (y - t²/2)` with new Hamiltonian
/// `K = P²/2 - y + t² + O/2`. Checked in the stochastic-differential form:
/// the `∘dx` coefficient `p - (P + G_y) y_x` and the `dt` coefficient
/// `-H - (P + G_y) y_t - G_t + K` must both vanish.
pub fn check_linear_potential_transform(n: usize, seed: u64) -> CanonicalReport {
    let mut r_dx = 0.0f64;
    let mut r_dt = 0.0f64;
    for i in 0..n as u64 {
        let x = -2.0 + 4.0 * uniform(seed, Stream::Generic(71), i, 0, 0);
        let p = -2.0 + 4.0 * uniform(seed, Stream::Generic(71), i, 1, 0);
        let o = -1.0 + 2.0 * uniform(seed, Stream::Generic(71), i, 2, 0);
        let t = -1.0 + 2.0 * uniform(seed, Stream::Generic(71), i, 3, 0);
        let y = x + 0.5 * t * t;
        let pp = p + t;
        let oo = o;
        let h = 0.5 * p * p + 0.5 * o;
        let k = 0.5 * pp * pp - y + t * t + 0.5 * oo;
        // G(y, t) = -t (y - t²/2): G_y = -t, G_t = -y + 3t²/2
        let g_y = -t;
        let g_t = -y + 1.5 * t * t;
        let (y_x, y_t) = (1.0, t);
        r_dx = r_dx.max((p - (pp + g_y) * y_x).abs());
        r_dt = r_dt.max((-h - (pp + g_y) * y_t - g_t + k).abs());
    }
    CanonicalReport {
        residuals: vec![
            ("dx coefficient".into(), r_dx),
            ("dt coefficient".into(), r_dt),
        ],
        degenerate: false,
        samples: n,
    }
}

/// Time-changed map `y = x/sqrt(1-t²)`, `P = p sqrt(1-t²) + y t`,
/// `s = arctanh t`: the latent coordinates must satisfy
/// `O = ∂P/∂y = (1-t²) o + t`. The check differentiates the composed map
/// numerically against the declared relation, with the momentum supplied by
/// a smooth test field `p(x)` and `o = p'(x)`.
pub fn check_time_change_transform(n: usize, seed: u64) -> CanonicalReport {
    let p_field = |x: f64| 0.3 * (1.3 * x).sin() + 0.2 * x;
    let o_field = |x: f64| 0.39 * (1.3 * x).cos() + 0.2;
    let mut r = 0.0f64;
    for i in 0..n as u64 {
        let x = -1.0 + 2.0 * uniform(seed, Stream::Generic(72), i, 0, 0);
        let t = -0.8 + 1.6 * uniform(seed, Stream::Generic(72), i, 1, 0);
        let root = (1.0 - t * t).sqrt();
        let y = x / root;
        let o_declared = (1.0 - t * t) * o_field(x) + t;
        // P as a function of y at fixed t, differentiated numerically
        let pp = |yy: f64| p_field(yy * root) * root + yy * t;
        let dp_dy = (-pp(y + 2.0 * FD_H) + 8.0 * pp(y + FD_H) - 8.0 * pp(y - FD_H)
            + pp(y - 2.0 * FD_H))
            / (12.0 * FD_H);
        r = r.max((o_declared - dp_dy).abs());
    }
    CanonicalReport {
        residuals: vec![("O - dP/dy".into(), r)],
        degenerate: false,
        samples: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oscillator_transform_relations_hold() {
        let rep = check_oscillator_transform(100, 2024);
        for (name, v) in &rep.residuals {
            assert!(*v <= 1e-10, "{name}: {v:.3e}");
        }
        assert!(!rep.degenerate);
    }

    #[test]
    fn linear_potential_transform_relations_hold() {
        let rep = check_linear_potential_transform(100, 2024);
        for (name, v) in &rep.residuals {
            assert!(*v <= 1e-10, "{name}: {v:.3e}");
        }
    }

    #[test]
    fn time_change_transform_relation_holds() {
        let rep = check_time_change_transform(100, 2024);
        assert!(rep.max_residual() <= 1e-10, "{:?}", rep.residuals);
    }

    #[test]
    fn degenerate_generating_function_is_flagged() {
        // G = x + y has G_xy = 0 everywhere
        let g = |x: f64, y: f64, _t: f64| x + y;
        let samples = [CanonicalSample {
            x: 0.3,
            p: 1.0,
            o: 0.0,
            y: 0.2,
            pp: -1.0,
            oo: 0.0,
            t: 0.0,
        }];
        let rep = generating_relation_residuals(&g, &samples);
        assert!(rep.degenerate);
    }

    #[test]
    fn wrong_map_is_detected() {
        // corrupt the oscillator map and the residual jumps
        let g = |x: f64, y: f64, _t: f64| -0.5 * x * x / y.tan();
        let samples = [CanonicalSample {
            x: 0.5,
            p: 0.9, // wrong momentum
            o: 0.0,
            y: 0.7,
            pp: -0.4,
            oo: 0.3,
            t: 0.0,
        }];
        let rep = generating_relation_residuals(&g, &samples);
        assert!(rep.max_residual() > 0.1);
    }
}
