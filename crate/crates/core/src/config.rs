//! Run configuration: strict JSON parsing with JSON-pointer error paths,
//! canonical serialization and content hashing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::income::InitialDensity;
use crate::market::{Grids, MarketParams, MarketSideParams, Side, Utility};
use crate::mc::{SimMode, TimeInterpolation, UniformScheme};
use crate::solver::{SolverOptions, SweepMode};
use crate::theory::DEFAULT_NU;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SideConfig {
    pub lambda: f64,
    pub r_slope: f64,
    pub h_slope: f64,
    pub density: InitialDensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub xmax: f64,
    #[serde(rename = "nA")]
    pub n_a: usize,
    #[serde(rename = "nB")]
    pub n_b: usize,
    #[serde(rename = "nT")]
    pub n_t: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            xmax: 7000.0,
            n_a: 200,
            n_b: 200,
            n_t: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub agents_per_side: usize,
    pub replicates: usize,
    pub bins: usize,
    pub mode: SimMode,
    pub scheme: UniformScheme,
    pub time_interpolation: TimeInterpolation,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            agents_per_side: 50_000,
            replicates: 8,
            bins: 20,
            mode: SimMode::default(),
            scheme: UniformScheme::default(),
            time_interpolation: TimeInterpolation::default(),
        }
    }
}

/// The full solver configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub rho: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "sideA")]
    pub side_a: SideConfig,
    #[serde(rename = "sideB")]
    pub side_b: SideConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    /// Envelope exponent for the theoretical constants.
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub simulate: SimulateConfig,
}

fn default_nu() -> f64 {
    DEFAULT_NU
}

type Checker = fn(&Value) -> std::result::Result<(), &'static str>;

fn positive(v: &Value) -> std::result::Result<(), &'static str> {
    match v.as_f64() {
        Some(x) if x.is_finite() && x > 0.0 => Ok(()),
        Some(_) => Err("must be a finite number > 0"),
        None => Err("expected a number"),
    }
}

fn nonnegative(v: &Value) -> std::result::Result<(), &'static str> {
    match v.as_f64() {
        Some(x) if x.is_finite() && x >= 0.0 => Ok(()),
        Some(_) => Err("must be a finite number >= 0"),
        None => Err("expected a number"),
    }
}

fn count(v: &Value) -> std::result::Result<(), &'static str> {
    match v.as_u64() {
        Some(n) if n >= 1 => Ok(()),
        Some(_) => Err("must be an integer >= 1"),
        None => Err("expected a positive integer"),
    }
}

fn unsigned(v: &Value) -> std::result::Result<(), &'static str> {
    v.as_u64().map(|_| ()).ok_or("expected a nonnegative integer")
}

fn string(v: &Value) -> std::result::Result<(), &'static str> {
    v.as_str().map(|_| ()).ok_or("expected a string")
}

fn object(v: &Value) -> std::result::Result<(), &'static str> {
    v.as_object().map(|_| ()).ok_or("expected an object")
}

fn damping(v: &Value) -> std::result::Result<(), &'static str> {
    match v.as_f64() {
        Some(x) if x > 0.0 && x <= 1.0 => Ok(()),
        Some(_) => Err("must lie in (0, 1]"),
        None => Err("expected a number"),
    }
}

struct Field {
    key: &'static str,
    required: bool,
    check: Checker,
}

const fn req(key: &'static str, check: Checker) -> Field {
    Field {
        key,
        required: true,
        check,
    }
}

const fn opt(key: &'static str, check: Checker) -> Field {
    Field {
        key,
        required: false,
        check,
    }
}

fn check_object<'a>(v: &'a Value, pointer: &str, fields: &[Field]) -> Result<&'a Map<String, Value>> {
    let map = v
        .as_object()
        .ok_or_else(|| Error::config(pointer, "expected an object"))?;
    for key in map.keys() {
        if !fields.iter().any(|f| f.key == key) {
            return Err(Error::config(format!("{pointer}/{key}"), "unknown key"));
        }
    }
    for f in fields {
        let at = format!("{pointer}/{}", f.key);
        match map.get(f.key) {
            Some(value) => (f.check)(value).map_err(|m| Error::config(&at, m))?,
            None if f.required => return Err(Error::config(at, "missing required key")),
            None => {}
        }
    }
    Ok(map)
}

fn check_side(v: &Value, pointer: &str) -> Result<()> {
    let map = check_object(
        v,
        pointer,
        &[
            req("lambda", nonnegative),
            req("r_slope", nonnegative),
            req("h_slope", nonnegative),
            req("density", object),
        ],
    )?;
    let at = format!("{pointer}/density");
    let density = check_object(&map["density"], &at, &[req("family", string), req("params", object)])?;
    let parsed: InitialDensity =
        serde_json::from_value(Value::Object(density.clone())).map_err(|e| Error::config(&at, e.to_string()))?;
    parsed
        .validate()
        .map_err(|e| Error::config(format!("{at}/params"), e.to_string()))
}

/// Validate a configuration document, reporting the first violation by its
/// JSON pointer.
pub fn validate_document(doc: &Value) -> Result<()> {
    let map = check_object(
        doc,
        "",
        &[
            req("rho", positive),
            req("T", positive),
            req("sideA", object),
            req("sideB", object),
            opt("grid", object),
            opt("solver", object),
            opt("nu", positive),
            opt("seed", unsigned),
            opt("simulate", object),
        ],
    )?;
    check_side(&map["sideA"], "/sideA")?;
    check_side(&map["sideB"], "/sideB")?;
    if let Some(g) = map.get("grid") {
        check_object(
            g,
            "/grid",
            &[
                opt("xmax", positive),
                opt("nA", count),
                opt("nB", count),
                opt("nT", count),
            ],
        )?;
    }
    if let Some(s) = map.get("solver") {
        let s = check_object(
            s,
            "/solver",
            &[
                opt("tol", positive),
                opt("max_iters", count),
                opt("denominator_floor", positive),
                opt("sweep_mode", string),
                opt("damping", damping),
            ],
        )?;
        if let Some(mode) = s.get("sweep_mode") {
            serde_json::from_value::<SweepMode>(mode.clone())
                .map_err(|e| Error::config("/solver/sweep_mode", e.to_string()))?;
        }
    }
    if let Some(s) = map.get("simulate") {
        let s = check_object(
            s,
            "/simulate",
            &[
                opt("agents_per_side", count),
                opt("replicates", count),
                opt("bins", count),
                opt("mode", string),
                opt("scheme", string),
                opt("time_interpolation", string),
            ],
        )?;
        if let Some(v) = s.get("mode") {
            serde_json::from_value::<SimMode>(v.clone()).map_err(|e| Error::config("/simulate/mode", e.to_string()))?;
        }
        if let Some(v) = s.get("scheme") {
            serde_json::from_value::<UniformScheme>(v.clone())
                .map_err(|e| Error::config("/simulate/scheme", e.to_string()))?;
        }
        if let Some(v) = s.get("time_interpolation") {
            serde_json::from_value::<TimeInterpolation>(v.clone())
                .map_err(|e| Error::config("/simulate/time_interpolation", e.to_string()))?;
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn from_value(doc: Value) -> Result<Self> {
        validate_document(&doc)?;
        serde_json::from_value(doc).map_err(|e| Error::config("", e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::config("", format!("malformed JSON: {e}")))?;
        Self::from_value(doc)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Pretty JSON with every default spelled out; parsing it back yields
    /// the same configuration.
    pub fn canonical_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    fn side_params(side: &SideConfig) -> MarketSideParams {
        MarketSideParams {
            intensity: side.lambda,
            running: Utility::linear(side.r_slope),
            terminal: Utility::linear(side.h_slope),
            initial_density: side.density.clone(),
        }
    }

    pub fn market(&self) -> MarketParams {
        MarketParams {
            side_a: Self::side_params(&self.side_a),
            side_b: Self::side_params(&self.side_b),
            rho: self.rho,
            horizon: self.horizon,
        }
    }

    pub fn grids(&self) -> Result<Grids> {
        Grids::new(
            self.grid.xmax,
            self.grid.n_a,
            self.grid.n_b,
            self.horizon,
            self.grid.n_t,
        )
    }

    pub fn side(&self, side: Side) -> &SideConfig {
        match side {
            Side::A => &self.side_a,
            Side::B => &self.side_b,
        }
    }

    /// The labor-market configuration with default grid and solver.
    pub fn labor_market() -> Self {
        let m = MarketParams::labor_market();
        let slope = |u: &Utility| match u {
            Utility::Linear { slope } => *slope,
            Utility::Tabulated { .. } => unreachable!("labor market utilities are linear"),
        };
        let side = |s: &MarketSideParams| SideConfig {
            lambda: s.intensity,
            r_slope: slope(&s.running),
            h_slope: slope(&s.terminal),
            density: s.initial_density.clone(),
        };
        RunConfig {
            rho: m.rho,
            horizon: m.horizon,
            side_a: side(&m.side_a),
            side_b: side(&m.side_b),
            grid: GridConfig::default(),
            solver: SolverOptions::default(),
            nu: DEFAULT_NU,
            seed: 0,
            simulate: SimulateConfig::default(),
        }
    }
}
