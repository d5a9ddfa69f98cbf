//! Run configuration: a flat `key = value` document (or a JSON object with the
//! same keys), validated into a [`RunConfig`] with every violation reported.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use muskat_core::functionals::PhysParams;
use muskat_core::fvref::Mobility;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::presets::{parse_preset, Preset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Jko,
    Fv,
    Compare,
    Sweep,
    Certify,
}

impl Mode {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "jko" | "run-jko" => Self::Jko,
            "fv" | "run-fv" => Self::Fv,
            "compare" => Self::Compare,
            "sweep" => Self::Sweep,
            "certify" => Self::Certify,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub phys: PhysParams,
    pub tau: f64,
    pub n: usize,
    pub grid: GridSpec,
    pub t_final: f64,
    pub f: Preset,
    pub g: Preset,
    /// Physical masses `(m_f, m_g)`; when set, the run works on unit-mass
    /// profiles with the masses folded into the model.
    pub masses: Option<(f64, f64)>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub sweep_taus: Vec<f64>,
    pub fv_mobility: Mobility,
    pub fv_cfl: f64,
    /// Number of steps sampled for the per-step certificates.
    pub certify_steps: usize,
    /// Number of dictionary test functions used per sampled step.
    pub certify_test_functions: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Jko,
            phys: PhysParams::default(),
            tau: 0.01,
            n: 256,
            grid: GridSpec {
                x_min: -8.0,
                x_max: 8.0,
                cells: 1024,
            },
            t_final: 1.0,
            f: Preset::Gaussian {
                mean: -0.5,
                sigma: 0.5,
            },
            g: Preset::Gaussian {
                mean: 0.5,
                sigma: 0.5,
            },
            masses: None,
            out: None,
            seed: 0,
            sweep_taus: vec![0.04, 0.02, 0.01, 0.005],
            fv_mobility: Mobility::Upwind,
            fv_cfl: 0.45,
            certify_steps: 10,
            certify_test_functions: 5,
        }
    }
}

/// Every key the schema accepts.
pub const KEYS: [&str; 19] = [
    "mode",
    "R",
    "R_mu",
    "tau",
    "N",
    "grid.x_min",
    "grid.x_max",
    "grid.cells",
    "T_final",
    "f",
    "g",
    "masses",
    "out",
    "seed",
    "sweep.tau",
    "fv.mobility",
    "fv.cfl",
    "certify.steps",
    "certify.test_functions",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{key}: {reason}")]
pub struct SchemaError {
    pub key: String,
    pub reason: String,
}

impl SchemaError {
    pub fn new(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

/// All violations found in one document.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct SchemaErrors(pub Vec<SchemaError>);

impl fmt::Display for SchemaErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl SchemaErrors {
    pub fn mentions(&self, key: &str) -> bool {
        self.0.iter().any(|e| e.key == key)
    }
}

pub type Entries = BTreeMap<String, String>;

/// Splits a document into raw entries without validating values.
pub fn parse_entries(text: &str) -> Result<Entries, SchemaErrors> {
    if text.trim_start().starts_with('{') {
        parse_json_entries(text)
    } else {
        parse_flat_entries(text)
    }
}

fn parse_flat_entries(text: &str) -> Result<Entries, SchemaErrors> {
    let mut out = Entries::new();
    let mut errors = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match split_pair(line) {
            Ok((k, v)) => {
                if out.insert(k.clone(), v).is_some() {
                    errors.push(SchemaError::new(k, "duplicate key"));
                }
            }
            Err(reason) => errors.push(SchemaError::new(format!("line {}", no + 1), reason)),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(SchemaErrors(errors))
    }
}

fn split_pair(s: &str) -> Result<(String, String), String> {
    let Some((k, v)) = s.split_once('=') else {
        return Err("expected `key = value`".into());
    };
    let k = k.trim();
    if k.is_empty() {
        return Err("empty key".into());
    }
    Ok((k.to_string(), v.trim().to_string()))
}

fn parse_json_entries(text: &str) -> Result<Entries, SchemaErrors> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| SchemaErrors(vec![SchemaError::new("<document>", e.to_string())]))?;
    let serde_json::Value::Object(map) = value else {
        return Err(SchemaErrors(vec![SchemaError::new(
            "<document>",
            "top level must be an object",
        )]));
    };
    let mut out = Entries::new();
    let mut errors = Vec::new();
    flatten_json("", &map, &mut out, &mut errors);
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(SchemaErrors(errors))
    }
}

fn flatten_json(
    prefix: &str,
    map: &serde_json::Map<String, serde_json::Value>,
    out: &mut Entries,
    errors: &mut Vec<SchemaError>,
) {
    use serde_json::Value;
    for (k, v) in map {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        let scalar = |v: &Value| -> Option<String> {
            match v {
                Value::String(s) => Some(s.clone()),
                Value::Number(n) => Some(n.to_string()),
                Value::Bool(b) => Some(b.to_string()),
                _ => None,
            }
        };
        let text = match v {
            Value::Object(inner) => {
                flatten_json(&key, inner, out, errors);
                continue;
            }
            Value::Array(items) => {
                let parts: Option<Vec<String>> = items.iter().map(scalar).collect();
                match parts {
                    Some(p) => p.join(", "),
                    None => {
                        errors.push(SchemaError::new(key, "arrays may only hold scalars"));
                        continue;
                    }
                }
            }
            Value::Null => {
                errors.push(SchemaError::new(key, "null is not a value"));
                continue;
            }
            other => scalar(other).expect("scalar"),
        };
        if out.insert(key.clone(), text).is_some() {
            errors.push(SchemaError::new(key, "duplicate key"));
        }
    }
}

/// Parses one `--override key=value` argument.
pub fn parse_override(s: &str) -> Result<(String, String), SchemaError> {
    split_pair(s.trim()).map_err(|reason| SchemaError::new(s.to_string(), reason))
}

pub fn parse_config(text: &str) -> Result<RunConfig, SchemaErrors> {
    parse_config_with_overrides(text, &[])
}

/// Parses `text`, applies `overrides` (later entries win) and validates.
pub fn parse_config_with_overrides(
    text: &str,
    overrides: &[(String, String)],
) -> Result<RunConfig, SchemaErrors> {
    let mut entries = parse_entries(text)?;
    for (k, v) in overrides {
        entries.insert(k.clone(), v.clone());
    }
    validate(&entries)
}

struct Reader<'a> {
    entries: &'a Entries,
    errors: Vec<SchemaError>,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn fail(&mut self, key: &str, reason: impl Into<String>) {
        self.errors.push(SchemaError::new(key, reason));
    }

    fn number(&mut self, key: &str, default: f64) -> f64 {
        let Some(v) = self.raw(key) else {
            return default;
        };
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => x,
            _ => {
                self.fail(key, format!("must be a finite number, got `{v}`"));
                default
            }
        }
    }

    fn positive(&mut self, key: &str, default: f64) -> f64 {
        let x = self.number(key, default);
        if !(x > 0.0) {
            self.fail(key, format!("must be > 0, got {x}"));
        }
        x
    }

    fn integer(&mut self, key: &str, default: u64, min: u64) -> u64 {
        let Some(v) = self.raw(key) else {
            return default;
        };
        match v.parse::<u64>() {
            Ok(x) if x >= min => x,
            Ok(x) => {
                self.fail(key, format!("must be >= {min}, got {x}"));
                default
            }
            Err(_) => {
                self.fail(key, format!("must be a nonnegative integer, got `{v}`"));
                default
            }
        }
    }

    fn list(&mut self, key: &str) -> Option<Vec<f64>> {
        let v = self.raw(key)?.to_string();
        let mut out = Vec::new();
        for part in v.split(',') {
            match part.trim().parse::<f64>() {
                Ok(x) if x.is_finite() => out.push(x),
                _ => {
                    self.fail(key, format!("expected comma-separated numbers, got `{v}`"));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn preset(&mut self, key: &str, default: Preset) -> Preset {
        let Some(v) = self.raw(key) else {
            return default;
        };
        match parse_preset(v) {
            Ok(p) => p,
            Err(e) => {
                self.fail(key, e.to_string());
                default
            }
        }
    }
}

fn validate(entries: &Entries) -> Result<RunConfig, SchemaErrors> {
    let d = RunConfig::default();
    let mut r = Reader {
        entries,
        errors: Vec::new(),
    };
    for k in entries.keys() {
        if !KEYS.contains(&k.as_str()) {
            r.fail(k, "unknown key");
        }
    }

    let mode = match r.raw("mode").map(|v| (v.to_string(), Mode::parse(v))) {
        None => d.mode,
        Some((_, Some(m))) => m,
        Some((v, None)) => {
            r.fail(
                "mode",
                format!("unknown mode `{v}` (jko, fv, compare, sweep, certify)"),
            );
            d.mode
        }
    };
    let phys = PhysParams {
        r: r.positive("R", d.phys.r),
        r_mu: r.positive("R_mu", d.phys.r_mu),
    };
    let tau = r.positive("tau", d.tau);
    let n = r.integer("N", d.n as u64, 4) as usize;
    let grid = GridSpec {
        x_min: r.number("grid.x_min", d.grid.x_min),
        x_max: r.number("grid.x_max", d.grid.x_max),
        cells: r.integer("grid.cells", d.grid.cells as u64, 2) as usize,
    };
    if !(grid.x_min < grid.x_max) {
        r.fail("grid.x_max", "must be greater than grid.x_min");
    }
    let t_final = r.number("T_final", d.t_final);
    if !(t_final >= 0.0) {
        r.fail("T_final", format!("must be >= 0, got {t_final}"));
    }
    let f = r.preset("f", d.f);
    let g = r.preset("g", d.g);
    let masses = match r.list("masses") {
        None => None,
        Some(m) if m.len() == 2 && m.iter().all(|x| *x > 0.0) => Some((m[0], m[1])),
        Some(_) => {
            r.fail("masses", "expected two numbers, each must be > 0");
            None
        }
    };
    let out = r.raw("out").map(PathBuf::from);
    let seed = r.integer("seed", d.seed, 0);
    let sweep_taus = match r.list("sweep.tau") {
        None => d.sweep_taus.clone(),
        Some(v) if !v.is_empty() && v.iter().all(|x| *x > 0.0) => v,
        Some(_) => {
            r.fail("sweep.tau", "each step must be > 0");
            d.sweep_taus.clone()
        }
    };
    let fv_mobility = match r.raw("fv.mobility") {
        None => d.fv_mobility,
        Some("upwind") => Mobility::Upwind,
        Some("centered") => Mobility::Centered,
        Some(v) => {
            let msg = format!("expected upwind or centered, got `{v}`");
            r.fail("fv.mobility", msg);
            d.fv_mobility
        }
    };
    let fv_cfl = r.positive("fv.cfl", d.fv_cfl);
    if fv_cfl > 1.0 {
        r.fail("fv.cfl", format!("must be <= 1, got {fv_cfl}"));
    }
    let certify_steps = r.integer("certify.steps", d.certify_steps as u64, 1) as usize;
    let certify_test_functions =
        r.integer("certify.test_functions", d.certify_test_functions as u64, 1) as usize;

    if !r.errors.is_empty() {
        return Err(SchemaErrors(r.errors));
    }
    Ok(RunConfig {
        mode,
        phys,
        tau,
        n,
        grid,
        t_final,
        f,
        g,
        masses,
        out,
        seed,
        sweep_taus,
        fv_mobility,
        fv_cfl,
        certify_steps,
        certify_test_functions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config("mode = jko\n").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.phys.r, 1.0);
        assert_eq!(c.phys.r_mu, 1.0);
        assert_eq!(c.tau, 0.01);
        assert_eq!(c.n, 256);
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
    }

    #[test]
    fn negative_r_names_the_key() {
        let e = parse_config("R = -1").unwrap_err();
        assert_eq!(e.0.len(), 1);
        assert_eq!(e.0[0].key, "R");
        assert!(e.0[0].reason.contains("must be > 0"));
    }

    #[test]
    fn every_violation_is_reported() {
        let e = parse_config("R = 0\ntau = x\nN = 2\nbogus = 1\nf = spiral(1)\nmode = walk")
            .unwrap_err();
        for k in ["R", "tau", "N", "bogus", "f", "mode"] {
            assert!(e.mentions(k), "{k} missing from {e}");
        }
    }

    #[test]
    fn comments_blank_lines_and_duplicates() {
        let c = parse_config("# header\n\ntau = 0.02  # trailing\n").unwrap();
        assert_eq!(c.tau, 0.02);
        assert!(parse_config("tau = 0.1\ntau = 0.2")
            .unwrap_err()
            .mentions("tau"));
        assert!(parse_config("just words").unwrap_err().mentions("line 1"));
    }

    #[test]
    fn json_matches_flat() {
        let flat = parse_config(
            "mode = compare\nR = 2\ngrid.cells = 512\nmasses = 2, 0.5\nf = uniform(0, 1)\nsweep.tau = 0.02, 0.01, 0.005",
        )
        .unwrap();
        let json = parse_config(
            r#"{"mode": "compare", "R": 2, "grid": {"cells": 512}, "masses": [2, 0.5],
                "f": "uniform(0, 1)", "sweep": {"tau": [0.02, 0.01, 0.005]}}"#,
        )
        .unwrap();
        assert_eq!(flat, json);
        assert_eq!(flat.masses, Some((2.0, 0.5)));
        assert!(parse_config("{\"R\": null}").unwrap_err().mentions("R"));
        assert!(parse_config("[1, 2]").is_err());
    }

    #[test]
    fn overrides_replace_entries() {
        let o = parse_override("tau=0.05").unwrap();
        let c = parse_config_with_overrides("tau = 0.01", &[o]).unwrap();
        assert_eq!(c.tau, 0.05);
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("=3").is_err());
        let bad = parse_override("N=1").unwrap();
        assert!(parse_config_with_overrides("", &[bad])
            .unwrap_err()
            .mentions("N"));
    }

    #[test]
    fn masses_need_two_positive_values() {
        assert!(parse_config("masses = 1").unwrap_err().mentions("masses"));
        assert!(parse_config("masses = 1, 0")
            .unwrap_err()
            .mentions("masses"));
    }

    #[test]
    fn grid_bounds_are_ordered() {
        assert!(parse_config("grid.x_min = 1\ngrid.x_max = -1")
            .unwrap_err()
            .mentions("grid.x_max"));
    }
}
