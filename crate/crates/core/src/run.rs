//! Run directories: persisting a solved equilibrium with its manifest and
//! loading it back for auditing, simulation and diagnostics.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grid::{fmt_f64, SpaceTimeField};
use crate::solver::{EquilibriumState, ResidualTerms};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACE_FILE: &str = "residuals.csv";
pub const FIELD_FILES: [&str; 4] = ["V_A.csv", "V_B.csv", "f_A.csv", "f_B.csv"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub name: String,
    pub sha256: String,
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: f64,
    pub wall_time_s: f64,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    pub residual: Option<f64>,
    pub files: Vec<FileRecord>,
}

fn epoch_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Collects written files and timing for a manifest.
pub struct ManifestBuilder {
    command: String,
    config: RunConfig,
    started_at: f64,
    clock: Instant,
    files: Vec<FileRecord>,
    out_dir: PathBuf,
}

impl ManifestBuilder {
    pub fn start(command: &str, config: &RunConfig, out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        Ok(ManifestBuilder {
            command: command.to_string(),
            config: config.clone(),
            started_at: epoch_seconds(),
            clock: Instant::now(),
            files: Vec::new(),
            out_dir: out_dir.to_path_buf(),
        })
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        let path = self.out_dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.files.retain(|f| f.name != name);
        self.files.push(FileRecord {
            name: name.to_string(),
            sha256: hex::encode(Sha256::digest(contents)),
        });
        Ok(())
    }

    pub fn finish(self, state: Option<&EquilibriumState>) -> Result<RunManifest> {
        let manifest = RunManifest {
            tool: "meanmatch".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            config: serde_json::to_value(&self.config)?,
            config_hash: self.config.hash(),
            seed: self.config.seed,
            started_at: self.started_at,
            finished_at: epoch_seconds(),
            wall_time_s: self.clock.elapsed().as_secs_f64(),
            converged: state.map(|s| s.converged),
            iterations: state.map(|s| s.iteration),
            residual: state.map(|s| s.residual),
            files: self.files,
        };
        let path = self.out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

pub fn trace_csv(trace: &[ResidualTerms]) -> String {
    let mut out = String::from("iter,E,E_VA,E_VB,E_fA,E_fB\n");
    for (n, t) in trace.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            n + 1,
            fmt_f64(t.total()),
            fmt_f64(t.e_va),
            fmt_f64(t.e_vb),
            fmt_f64(t.e_fa),
            fmt_f64(t.e_fb)
        ));
    }
    out
}

/// Write the four field CSVs, the residual trace, the canonical config and
/// the manifest.
pub fn write_solution(out_dir: &Path, config: &RunConfig, state: &EquilibriumState) -> Result<RunManifest> {
    let mut m = ManifestBuilder::start("solve", config, out_dir)?;
    write_solution_files(&mut m, config, state)?;
    m.finish(Some(state))
}

pub fn write_solution_files(m: &mut ManifestBuilder, config: &RunConfig, state: &EquilibriumState) -> Result<()> {
    for (name, field) in FIELD_FILES.iter().zip([&state.v_a, &state.v_b, &state.f_a, &state.f_b]) {
        m.write(name, field.to_csv().as_bytes())?;
    }
    m.write(TRACE_FILE, trace_csv(&state.trace).as_bytes())?;
    m.write(CONFIG_FILE, config.canonical_json().as_bytes())
}

fn read_field(dir: &Path, name: &str) -> Result<SpaceTimeField> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    SpaceTimeField::from_csv(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

/// A solved run loaded from disk.
pub struct LoadedRun {
    pub config: RunConfig,
    pub manifest: RunManifest,
    pub state: EquilibriumState,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let config = RunConfig::from_path(&dir.join(CONFIG_FILE))?;
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    let [v_a, v_b, f_a, f_b] = FIELD_FILES.map(|n| read_field(dir, n));
    let (v_a, v_b, f_a, f_b) = (v_a?, v_b?, f_a?, f_b?);
    if !(v_a.same_shape(&f_a) && v_b.same_shape(&f_b) && v_a.time() == v_b.time()) {
        return Err(Error::InvalidArgument(format!(
            "{}: field shapes disagree",
            dir.display()
        )));
    }
    let state = EquilibriumState {
        v_a,
        v_b,
        f_a,
        f_b,
        iteration: manifest.iterations.unwrap_or(0),
        residual: manifest.residual.unwrap_or(f64::NAN),
        converged: manifest.converged.unwrap_or(false),
        trace: Vec::new(),
    };
    Ok(LoadedRun {
        config,
        manifest,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::solve_fixed_point;

    #[test]
    fn solution_round_trips_through_disk() {
        let mut config = RunConfig::labor_market();
        config.side_a.lambda = 4.0;
        config.side_b.lambda = 5.0;
        config.grid.n_a = 30;
        config.grid.n_b = 30;
        config.grid.n_t = 40;
        let state = solve_fixed_point(&config.market(), &config.grids().unwrap(), &config.solver).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_solution(dir.path(), &config, &state).unwrap();
        assert_eq!(manifest.config_hash, config.hash());
        assert_eq!(manifest.files.len(), 6);
        let back = load_run(dir.path()).unwrap();
        assert_eq!(back.config, config);
        assert_eq!(back.state.v_a, state.v_a);
        assert_eq!(back.state.f_b, state.f_b);
        assert_eq!(back.state.converged, state.converged);
        let trace = fs::read_to_string(dir.path().join(TRACE_FILE)).unwrap();
        assert_eq!(trace.lines().count(), state.trace.len() + 1);
    }
}
