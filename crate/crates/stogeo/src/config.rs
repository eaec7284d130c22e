//! Configuration schema and validation.
//!
//! Configs are JSON. Validation happens against the raw value tree so that
//! every violation in the file is reported at once, unknown keys included;
//! only a clean tree is converted into the typed [`RunConfig`].

use crate::expr::{self, Expr};
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    MeanDerivatives,
    Bridge,
    Hjb,
    Hamilton,
    Noether,
    Symmetry,
    Transport,
    Legendre,
    CanonicalCheck,
}

impl Command {
    fn from_str(s: &str) -> Option<Command> {
        Some(match s {
            "simulate" => Command::Simulate,
            "mean-derivatives" => Command::MeanDerivatives,
            "bridge" => Command::Bridge,
            "hjb" => Command::Hjb,
            "hamilton" => Command::Hamilton,
            "noether" => Command::Noether,
            "symmetry" => Command::Symmetry,
            "transport" => Command::Transport,
            "legendre" => Command::Legendre,
            "canonical-check" => Command::CanonicalCheck,
            _ => return None,
        })
    }
}

/// Spatial/temporal grid parameters.
#[derive(Debug, Clone, Serialize)]
pub struct GridConfig {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub cells: Vec<usize>,
    pub periodic: Vec<bool>,
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatticeConfig {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub points: usize,
    pub t0: f64,
    pub t1: f64,
    pub t_points: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalConfig {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub points: usize,
    pub t_index: usize,
}

/// Validated run configuration.
#[derive(Debug)]
pub struct RunConfig {
    pub command: Command,
    pub model_id: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub n_paths: usize,
    pub dt: Option<f64>,
    pub epsilon: f64,
    pub grid: Option<GridConfig>,
    pub lattice: Option<LatticeConfig>,
    pub eval: Option<EvalConfig>,
    pub drift: Option<Vec<Expr>>,
    pub potential: Option<Expr>,
    pub sigma2: Option<Vec<Vec<Expr>>>,
    pub s_terminal: Option<Expr>,
    pub surrogate_center: Option<Vec<f64>>,
    pub surrogate_width_cells: Option<f64>,
    pub mu0_center: Option<Vec<f64>>,
    pub mu0_std: Option<f64>,
    pub hamiltonian: Option<String>,
    pub v0_expr: Option<Expr>,
    pub v_expr: Option<Vec<Expr>>,
    pub phi_expr: Option<Expr>,
    pub transport_kind: Option<String>,
    pub transport_variance: Option<String>,
    pub transport_v0: Option<Vec<f64>>,
    pub transport_path: Option<String>,
    pub legendre_point: Option<(f64, Vec<f64>, Vec<f64>)>,
    pub canonical_example: Option<String>,
    pub canonical_samples: usize,
    pub tolerances: BTreeMap<String, f64>,
    pub sim_t_end: Option<f64>,
    /// Raw JSON echoed into run.json.
    pub raw: serde_json::Value,
}

/// All violations found in one pass.
#[derive(Debug)]
pub struct ConfigErrors(pub Vec<String>);

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.0 {
            writeln!(f, "config error: {e}")?;
        }
        Ok(())
    }
}

pub fn model_dim(model_id: &str) -> Option<usize> {
    if let Some(d) = model_id.strip_prefix("euclidean:") {
        return d.parse().ok().filter(|d| *d >= 1);
    }
    if let Some(d) = model_id.strip_prefix("torus:") {
        return d.parse().ok().filter(|d| *d >= 1);
    }
    if model_id == "circle" {
        return Some(1);
    }
    if model_id == "sphere2" {
        return Some(2);
    }
    if model_id.strip_prefix("conformal1d:").is_some() {
        return Some(1);
    }
    None
}

struct Check<'a> {
    errors: Vec<String>,
    obj: &'a serde_json::Map<String, serde_json::Value>,
}

impl<'a> Check<'a> {
    fn f64_at(&mut self, v: &serde_json::Value, path: &str) -> Option<f64> {
        match v.as_f64() {
            Some(x) if x.is_finite() => Some(x),
            _ => {
                self.errors.push(format!("`{path}` must be a finite number"));
                None
            }
        }
    }

    fn usize_at(&mut self, v: &serde_json::Value, path: &str) -> Option<usize> {
        match v.as_u64() {
            Some(x) => Some(x as usize),
            None => {
                self.errors
                    .push(format!("`{path}` must be a non-negative integer"));
                None
            }
        }
    }

    fn str_at<'v>(&mut self, v: &'v serde_json::Value, path: &str) -> Option<&'v str> {
        match v.as_str() {
            Some(s) => Some(s),
            None => {
                self.errors.push(format!("`{path}` must be a string"));
                None
            }
        }
    }

    fn f64_vec(&mut self, v: &serde_json::Value, path: &str) -> Option<Vec<f64>> {
        let arr = match v.as_array() {
            Some(a) => a,
            None => {
                self.errors.push(format!("`{path}` must be an array"));
                return None;
            }
        };
        let mut out = Vec::with_capacity(arr.len());
        for (i, e) in arr.iter().enumerate() {
            out.push(self.f64_at(e, &format!("{path}[{i}]"))?);
        }
        Some(out)
    }

    fn expr_at(&mut self, v: &serde_json::Value, path: &str, dim: usize) -> Option<Expr> {
        let s = self.str_at(v, path)?;
        match expr::parse(s, dim) {
            Ok(e) => Some(e),
            Err(err) => {
                self.errors
                    .push(format!("`{path}`: cannot parse expression `{s}` ({err})"));
                None
            }
        }
    }

    fn expr_vec(&mut self, v: &serde_json::Value, path: &str, dim: usize) -> Option<Vec<Expr>> {
        let arr = match v.as_array() {
            Some(a) => a,
            None => {
                self.errors
                    .push(format!("`{path}` must be an array of expressions"));
                return None;
            }
        };
        let mut out = Vec::with_capacity(arr.len());
        for (i, e) in arr.iter().enumerate() {
            out.push(self.expr_at(e, &format!("{path}[{i}]"), dim)?);
        }
        Some(out)
    }

    fn sub_object<'v>(
        &mut self,
        v: &'v serde_json::Value,
        path: &str,
        allowed: &[&str],
    ) -> Option<&'v serde_json::Map<String, serde_json::Value>> {
        let obj = match v.as_object() {
            Some(o) => o,
            None => {
                self.errors.push(format!("`{path}` must be an object"));
                return None;
            }
        };
        for key in obj.keys() {
            if !allowed.contains(&key.as_str()) {
                self.errors
                    .push(format!("unknown key `{path}.{key}` (allowed: {allowed:?})"));
            }
        }
        Some(obj)
    }
}

const TOP_KEYS: &[&str] = &[
    "command",
    "model",
    "seed",
    "threads",
    "n_paths",
    "dt",
    "t_end",
    "epsilon",
    "grid",
    "lattice",
    "eval",
    "fields",
    "hamiltonian",
    "vector_field",
    "transport",
    "legendre",
    "canonical",
    "tolerances",
    "out_dir",
];

const FIELD_KEYS: &[&str] = &[
    "b",
    "F",
    "sigma2",
    "s_terminal",
    "surrogate_center",
    "surrogate_width_cells",
    "mu0_center",
    "mu0_std",
];

/// Parses and validates a configuration value, reporting every violation.
pub fn validate(value: serde_json::Value) -> Result<RunConfig, ConfigErrors> {
    let obj = match value.as_object() {
        Some(o) => o.clone(),
        None => {
            return Err(ConfigErrors(vec![
                "top-level configuration must be a JSON object".into()
            ]))
        }
    };
    let mut chk = Check {
        errors: Vec::new(),
        obj: &obj,
    };
    for key in chk.obj.keys() {
        if !TOP_KEYS.contains(&key.as_str()) {
            chk.errors
                .push(format!("unknown key `{key}` (allowed: {TOP_KEYS:?})"));
        }
    }

    let command = match obj.get("command") {
        Some(v) => chk
            .str_at(v, "command")
            .and_then(|s| match Command::from_str(s) {
                Some(c) => Some(c),
                None => {
                    chk.errors.push(format!(
                        "unknown command `{s}` (expected one of simulate, mean-derivatives, bridge, hjb, hamilton, noether, symmetry, transport, legendre, canonical-check)"
                    ));
                    None
                }
            }),
        None => {
            chk.errors.push("missing required key `command`".into());
            None
        }
    };

    let model_id = match obj.get("model") {
        Some(v) => chk.str_at(v, "model").map(|s| s.to_string()),
        None => {
            chk.errors.push("missing required key `model`".into());
            None
        }
    };
    let dim = model_id.as_deref().and_then(model_dim);
    if let Some(id) = &model_id {
        if dim.is_none() {
            chk.errors.push(format!(
                "unknown model `{id}` (expected euclidean:<d>, circle, torus:<d>, sphere2, conformal1d:<id>)"
            ));
        }
    }
    let dim = dim.unwrap_or(1);

    let seed = obj
        .get("seed")
        .and_then(|v| chk.usize_at(v, "seed"))
        .map(|v| v as u64)
        .unwrap_or(0);
    let threads = obj.get("threads").and_then(|v| chk.usize_at(v, "threads"));
    let n_paths = match obj.get("n_paths") {
        Some(v) => {
            let n = chk.usize_at(v, "n_paths").unwrap_or(0);
            if n == 0 {
                chk.errors.push("`n_paths` must be at least 1".into());
            }
            n.max(1)
        }
        None => 1000,
    };
    let dt = obj.get("dt").and_then(|v| chk.f64_at(v, "dt"));
    if let Some(v) = dt {
        if v <= 0.0 {
            chk.errors.push("`dt` must be positive".into());
        }
    }
    let sim_t_end = obj.get("t_end").and_then(|v| chk.f64_at(v, "t_end"));
    let epsilon = match obj.get("epsilon") {
        Some(v) => {
            let e = chk.f64_at(v, "epsilon").unwrap_or(1.0);
            if e <= 0.0 {
                chk.errors.push("`epsilon` must be positive".into());
            }
            e
        }
        None => 1.0,
    };

    let grid = obj.get("grid").and_then(|v| {
        let g = chk.sub_object(v, "grid", &["min", "max", "cells", "periodic", "t0", "t1", "steps"])?;
        let min = g.get("min").and_then(|v| chk.f64_vec(v, "grid.min"))?;
        let max = g.get("max").and_then(|v| chk.f64_vec(v, "grid.max"))?;
        let cells_raw = match g.get("cells") {
            Some(serde_json::Value::Array(a)) => a
                .iter()
                .enumerate()
                .filter_map(|(i, e)| chk.usize_at(e, &format!("grid.cells[{i}]")))
                .collect(),
            _ => {
                chk.errors.push("`grid.cells` must be an array".into());
                vec![]
            }
        };
        let periodic = match g.get("periodic") {
            Some(serde_json::Value::Array(a)) => a.iter().map(|e| e.as_bool().unwrap_or(false)).collect(),
            None => vec![false; min.len()],
            _ => {
                chk.errors.push("`grid.periodic` must be an array of booleans".into());
                vec![false; min.len()]
            }
        };
        let t0 = g.get("t0").and_then(|v| chk.f64_at(v, "grid.t0")).unwrap_or(0.0);
        let t1 = g.get("t1").and_then(|v| chk.f64_at(v, "grid.t1")).unwrap_or(1.0);
        let steps = g.get("steps").and_then(|v| chk.usize_at(v, "grid.steps")).unwrap_or(128);
        if min.len() != max.len() || min.len() != cells_raw.len() {
            chk.errors.push("`grid` min/max/cells lengths disagree".into());
        }
        if min.len() != dim {
            chk.errors.push(format!(
                "`grid` has {} axes but model `{}` has dimension {dim}",
                min.len(),
                model_id.as_deref().unwrap_or("?")
            ));
        }
        for (i, c) in cells_raw.iter().enumerate() {
            if *c < 8 {
                chk.errors.push(format!("`grid.cells[{i}]` must be at least 8"));
            }
        }
        if steps == 0 {
            chk.errors.push("`grid.steps` must be at least 1".into());
        }
        if t1 <= t0 {
            chk.errors.push("`grid.t1` must exceed `grid.t0`".into());
        }
        Some(GridConfig {
            min,
            max,
            cells: cells_raw,
            periodic,
            t0,
            t1,
            steps,
        })
    });

    let lattice = obj.get("lattice").and_then(|v| {
        let g = chk.sub_object(v, "lattice", &["min", "max", "points", "t0", "t1", "t_points"])?;
        let min = g.get("min").and_then(|v| chk.f64_vec(v, "lattice.min"))?;
        let max = g.get("max").and_then(|v| chk.f64_vec(v, "lattice.max"))?;
        let points = g.get("points").and_then(|v| chk.usize_at(v, "lattice.points")).unwrap_or(32);
        let t0 = g.get("t0").and_then(|v| chk.f64_at(v, "lattice.t0")).unwrap_or(0.0);
        let t1 = g.get("t1").and_then(|v| chk.f64_at(v, "lattice.t1")).unwrap_or(1.0);
        let t_points = g
            .get("t_points")
            .and_then(|v| chk.usize_at(v, "lattice.t_points"))
            .unwrap_or(16);
        Some(LatticeConfig {
            min,
            max,
            points,
            t0,
            t1,
            t_points,
        })
    });

    let eval = obj.get("eval").and_then(|v| {
        let g = chk.sub_object(v, "eval", &["min", "max", "points", "t_index"])?;
        let min = g.get("min").and_then(|v| chk.f64_vec(v, "eval.min"))?;
        let max = g.get("max").and_then(|v| chk.f64_vec(v, "eval.max"))?;
        let points = g.get("points").and_then(|v| chk.usize_at(v, "eval.points")).unwrap_or(21);
        let t_index = g
            .get("t_index")
            .and_then(|v| chk.usize_at(v, "eval.t_index"))
            .unwrap_or(0);
        Some(EvalConfig {
            min,
            max,
            points,
            t_index,
        })
    });

    let mut drift = None;
    let mut potential = None;
    let mut sigma2 = None;
    let mut s_terminal = None;
    let mut surrogate_center = None;
    let mut surrogate_width_cells = None;
    let mut mu0_center = None;
    let mut mu0_std = None;
    if let Some(v) = obj.get("fields") {
        if let Some(f) = chk.sub_object(v, "fields", FIELD_KEYS) {
            if let Some(b) = f.get("b") {
                drift = chk.expr_vec(b, "fields.b", dim);
                if let Some(v) = &drift {
                    if v.len() != dim {
                        chk.errors
                            .push(format!("`fields.b` needs {dim} components, got {}", v.len()));
                    }
                }
            }
            if let Some(fe) = f.get("F") {
                potential = chk.expr_at(fe, "fields.F", dim);
            }
            if let Some(s) = f.get("sigma2") {
                sigma2 = (|| {
                    let rows = s.as_array()?;
                    let mut out = Vec::new();
                    for (i, r) in rows.iter().enumerate() {
                        out.push(chk.expr_vec(r, &format!("fields.sigma2[{i}]"), dim)?);
                    }
                    Some(out)
                })();
                if sigma2.is_none() {
                    chk.errors
                        .push("`fields.sigma2` must be a matrix of expressions".into());
                }
            }
            if let Some(s) = f.get("s_terminal") {
                s_terminal = chk.expr_at(s, "fields.s_terminal", dim);
            }
            if let Some(s) = f.get("surrogate_center") {
                surrogate_center = chk.f64_vec(s, "fields.surrogate_center");
            }
            if let Some(s) = f.get("surrogate_width_cells") {
                surrogate_width_cells = chk.f64_at(s, "fields.surrogate_width_cells");
            }
            if let Some(s) = f.get("mu0_center") {
                mu0_center = chk.f64_vec(s, "fields.mu0_center");
            }
            if let Some(s) = f.get("mu0_std") {
                mu0_std = chk.f64_at(s, "fields.mu0_std");
            }
        }
    }

    let hamiltonian = obj
        .get("hamiltonian")
        .and_then(|v| chk.str_at(v, "hamiltonian"))
        .map(|s| {
            if !["quadratic", "harmonic", "euclidean-harmonic", "free"].contains(&s) {
                chk.errors.push(format!(
                    "unknown hamiltonian `{s}` (expected quadratic, harmonic, euclidean-harmonic, free)"
                ));
            }
            s.to_string()
        });

    let mut v0_expr = None;
    let mut v_expr = None;
    let mut phi_expr = None;
    if let Some(v) = obj.get("vector_field") {
        if let Some(f) = chk.sub_object(v, "vector_field", &["v0", "v", "phi"]) {
            if let Some(e) = f.get("v0") {
                // V0 depends on time only
                v0_expr = chk.expr_at(e, "vector_field.v0", 0);
            }
            if let Some(e) = f.get("v") {
                v_expr = chk.expr_vec(e, "vector_field.v", dim);
            }
            if let Some(e) = f.get("phi") {
                phi_expr = chk.expr_at(e, "vector_field.phi", dim);
            }
        }
    }

    let mut transport_kind = None;
    let mut transport_variance = None;
    let mut transport_v0 = None;
    let mut transport_path = None;
    if let Some(v) = obj.get("transport") {
        if let Some(f) = chk.sub_object(v, "transport", &["kind", "variance", "v0", "path"]) {
            transport_kind = f
                .get("kind")
                .and_then(|e| chk.str_at(e, "transport.kind"))
                .map(str::to_string);
            transport_variance = f
                .get("variance")
                .and_then(|e| chk.str_at(e, "transport.variance"))
                .map(str::to_string);
            transport_v0 = f.get("v0").and_then(|e| chk.f64_vec(e, "transport.v0"));
            transport_path = f
                .get("path")
                .and_then(|e| chk.str_at(e, "transport.path"))
                .map(str::to_string);
        }
    }

    let mut legendre_point = None;
    if let Some(v) = obj.get("legendre") {
        if let Some(f) = chk.sub_object(v, "legendre", &["t", "x", "xdot"]) {
            let t = f.get("t").and_then(|e| chk.f64_at(e, "legendre.t")).unwrap_or(0.0);
            let x = f.get("x").and_then(|e| chk.f64_vec(e, "legendre.x"));
            let xd = f.get("xdot").and_then(|e| chk.f64_vec(e, "legendre.xdot"));
            if let (Some(x), Some(xd)) = (x, xd) {
                legendre_point = Some((t, x, xd));
            } else {
                chk.errors
                    .push("`legendre` needs `x` and `xdot` arrays".into());
            }
        }
    }

    let mut canonical_example = None;
    let mut canonical_samples = 100usize;
    if let Some(v) = obj.get("canonical") {
        if let Some(f) = chk.sub_object(v, "canonical", &["example", "samples"]) {
            canonical_example = f
                .get("example")
                .and_then(|e| chk.str_at(e, "canonical.example"))
                .map(|s| {
                    if !["oscillator", "linear-potential", "time-change"].contains(&s) {
                        chk.errors.push(format!(
                            "unknown canonical example `{s}` (expected oscillator, linear-potential, time-change)"
                        ));
                    }
                    s.to_string()
                });
            if let Some(e) = f.get("samples") {
                canonical_samples = chk.usize_at(e, "canonical.samples").unwrap_or(100).max(1);
            }
        }
    }

    let mut tolerances = BTreeMap::new();
    if let Some(v) = obj.get("tolerances") {
        match v.as_object() {
            Some(t) => {
                for (k, val) in t {
                    if let Some(x) = chk.f64_at(val, &format!("tolerances.{k}")) {
                        tolerances.insert(k.clone(), x);
                    }
                }
            }
            None => chk.errors.push("`tolerances` must be an object".into()),
        }
    }

    if !chk.errors.is_empty() {
        return Err(ConfigErrors(chk.errors));
    }
    Ok(RunConfig {
        command: command.expect("validated"),
        model_id: model_id.expect("validated"),
        seed,
        threads,
        n_paths,
        dt,
        epsilon,
        grid,
        lattice,
        eval,
        drift,
        potential,
        sigma2,
        s_terminal,
        surrogate_center,
        surrogate_width_cells,
        mu0_center,
        mu0_std,
        hamiltonian,
        v0_expr,
        v_expr,
        phi_expr,
        transport_kind,
        transport_variance,
        transport_v0,
        transport_path,
        legendre_point,
        canonical_example,
        canonical_samples,
        tolerances,
        sim_t_end,
        raw: serde_json::Value::Object(obj),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn minimal_bridge_config_validates() {
        let v = json!({
            "command": "bridge",
            "model": "euclidean:1",
            "grid": {"min": [-3.0], "max": [3.0], "cells": [128], "t0": 0.0, "t1": 1.0, "steps": 128},
            "n_paths": 100,
        });
        let cfg = validate(v).unwrap();
        assert_eq!(cfg.command, Command::Bridge);
        assert_eq!(cfg.n_paths, 100);
    }

    #[test]
    fn unknown_key_is_named() {
        let v = json!({
            "command": "bridge",
            "modle": "euclidean:1",
        });
        let err = validate(v).unwrap_err();
        let joined = err.0.join("\n");
        assert!(joined.contains("unknown key `modle`"), "{joined}");
        assert!(joined.contains("missing required key `model`"), "{joined}");
    }

    #[test]
    fn negative_n_paths_rejected_with_constraint() {
        let v = json!({
            "command": "simulate",
            "model": "euclidean:1",
            "n_paths": -5,
        });
        let err = validate(v).unwrap_err();
        assert!(err.0.iter().any(|e| e.contains("n_paths")), "{err:?}");
    }

    #[test]
    fn violations_are_aggregated() {
        let v = json!({
            "command": "wat",
            "model": "klein-bottle",
            "dt": -1.0,
            "bogus": 1,
        });
        let err = validate(v).unwrap_err();
        assert!(err.0.len() >= 4, "{err:?}");
    }

    #[test]
    fn expression_errors_carry_path() {
        let v = json!({
            "command": "symmetry",
            "model": "euclidean:1",
            "fields": {"b": ["x1 + 1"]},
        });
        let err = validate(v).unwrap_err();
        assert!(
            err.0.iter().any(|e| e.contains("fields.b[0]")),
            "{err:?}"
        );
    }
}
