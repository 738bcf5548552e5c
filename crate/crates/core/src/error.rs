use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("query {value} outside domain [{lo}, {hi}]")]
    OutOfDomain { value: f64, lo: f64, hi: f64 },

    /// A value field lost monotonicity in quality, so region membership
    /// can no longer be decided without an explicit inverse.
    #[error("solver health: {field} non-monotone at time index {t_index} (drop {drop:e} at node {node})")]
    NonMonotone {
        field: &'static str,
        t_index: usize,
        node: usize,
        drop: f64,
    },

    #[error("numerical fault: non-finite value in {field} at (i={i}, k={k})")]
    NonFinite { field: &'static str, i: usize, k: usize },

    #[error("quantile bracketing exceeded {limit:e} (prob {prob})")]
    Bracketing { prob: f64, limit: f64 },

    #[error("insufficient matched mass {mass:e} at node {x_index} (floor {floor:e})")]
    InsufficientMatchedMass { x_index: usize, mass: f64, floor: f64 },

    #[error("empty band ({lo}, {hi}): no grid nodes")]
    EmptyBand { lo: f64, hi: f64 },

    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
