//! Post-solution quantities: unmatched rates, survival probabilities,
//! partner-quality densities, percentile-band aggregates and figure data.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{fmt_f64, riemann_sum_right, SpaceTimeField};
use crate::market::{MarketParams, Side};
use crate::solver::EquilibriumState;

/// Matched mass below which a partner density is not reported.
pub const MASS_FLOOR: f64 = 1e-6;

/// Default percentile bands of the initial quality distribution.
pub const DEFAULT_BANDS: [(f64, f64); 5] = [(0.0, 0.2), (0.2, 0.4), (0.4, 0.6), (0.6, 0.8), (0.8, 1.0)];

/// Right-endpoint mass of `f(., t_k)`: the unmatched mass at `t_k`.
pub fn unmatched_rate(f: &SpaceTimeField, t_index: usize) -> f64 {
    riemann_sum_right(f.slice(t_index), f.space().dx())
}

/// Unmatched mass at `t_k` relative to the initial mass; one when nothing
/// has matched. Defined as one for an empty initial population.
pub fn unmatched_fraction(f: &SpaceTimeField, t_index: usize) -> f64 {
    let initial = unmatched_rate(f, 0);
    if initial > 0.0 {
        unmatched_rate(f, t_index) / initial
    } else {
        1.0
    }
}

/// `f(x,t)/f0(x)`, or `None` where `f0(x) = 0` and survival is undefined.
pub fn survival_probability(f: &SpaceTimeField, f0: &[f64], x_index: usize, t_index: usize) -> Option<f64> {
    let base = f0[x_index];
    if base > 0.0 {
        Some(f.get(x_index, t_index) / base)
    } else {
        None
    }
}

/// Quality density of the eventual partner of a side-`I` agent of quality
/// `x`, conditional on matching before the horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartnerDensity {
    pub side: Side,
    pub own_quality: f64,
    pub partner_nodes: Vec<f64>,
    pub density: Vec<f64>,
    /// `f0(x) - f(x, T)`.
    pub matched_mass: f64,
}

impl PartnerDensity {
    /// `dy * sum g(y_l)` over `l >= 1`.
    pub fn total(&self) -> f64 {
        riemann_sum_right(&self.density, self.dy())
    }

    /// `dy * sum y_l g(y_l)` over `l >= 1`.
    pub fn first_moment(&self) -> f64 {
        let weighted: Vec<f64> = self
            .partner_nodes
            .iter()
            .zip(&self.density)
            .map(|(y, g)| y * g)
            .collect();
        riemann_sum_right(&weighted, self.dy())
    }

    fn dy(&self) -> f64 {
        self.partner_nodes[1] - self.partner_nodes[0]
    }
}

/// Partner density of side `side` at quality node `x_index`. The time
/// integral pairs `f_I` at `t_{k+1}` with the partner density and the
/// matching region at `t_k`, the pairing the density update uses, so that
/// the discrete normalization telescopes.
pub fn partner_density(
    state: &EquilibriumState,
    params: &MarketParams,
    x_index: usize,
    side: Side,
) -> Result<PartnerDensity> {
    partner_density_with_floor(state, params, x_index, side, MASS_FLOOR)
}

/// As [`partner_density`] with an explicit matched-mass floor.
pub fn partner_density_with_floor(
    state: &EquilibriumState,
    params: &MarketParams,
    x_index: usize,
    side: Side,
    mass_floor: f64,
) -> Result<PartnerDensity> {
    let v_self = state.value(side);
    let v_other = state.value(side.other());
    let f_self = state.density(side);
    let f_other = state.density(side.other());
    let x_grid = v_self.space();
    if x_index >= x_grid.len() {
        return Err(Error::InvalidArgument(format!("node {x_index} out of range")));
    }
    let time = v_self.time();
    let n_t = time.n_steps();
    let matched_mass = f_self.get(x_index, 0) - f_self.get(x_index, n_t);
    if !(matched_mass > mass_floor) {
        return Err(Error::InsufficientMatchedMass {
            x_index,
            mass: matched_mass,
            floor: mass_floor,
        });
    }
    let x = x_grid.node(x_index);
    let y_grid = v_other.space();
    let rate = params.side(side.other()).intensity;
    let dt = time.dt();
    let mut density = vec![0.0; y_grid.len()];
    for k in 0..n_t {
        let threshold = v_self.get(x_index, k);
        let weight = f_self.get(x_index, k + 1) * dt;
        let (vo, fo) = (v_other.slice(k), f_other.slice(k));
        for l in 1..y_grid.len() {
            if threshold <= y_grid.node(l) && vo[l] <= x {
                density[l] += weight * fo[l];
            }
        }
    }
    for g in &mut density {
        *g *= rate / matched_mass;
    }
    Ok(PartnerDensity {
        side,
        own_quality: x,
        partner_nodes: y_grid.nodes().to_vec(),
        density,
        matched_mass,
    })
}

/// Expected partner quality given a match before the horizon.
pub fn expected_partner_quality(
    state: &EquilibriumState,
    params: &MarketParams,
    x_index: usize,
    side: Side,
) -> Result<f64> {
    partner_density(state, params, x_index, side).map(|g| g.first_moment())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandQuantity {
    /// Population-weighted average of `f/f0` within the band.
    Survival,
    /// The band's unmatched mass as a share of the side's initial mass.
    UnmatchedShare,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandSummary {
    pub p_lo: f64,
    pub p_hi: f64,
    pub x_lo: f64,
    pub x_hi: f64,
    /// One value per time node.
    pub values: Vec<f64>,
}

/// Quality edges of a percentile band of the initial distribution
/// conditioned on the grid domain.
fn band_edges(params: &MarketParams, side: Side, x_max: f64, p_lo: f64, p_hi: f64) -> Result<(f64, f64)> {
    let d = &params.side(side).initial_density;
    let edge = |p: f64| -> Result<f64> {
        if p <= 0.0 {
            Ok(0.0)
        } else if p >= 1.0 {
            Ok(x_max)
        } else {
            d.truncated_quantile(p, x_max)
        }
    };
    Ok((edge(p_lo)?, edge(p_hi)?))
}

fn validate_bands(bands: &[(f64, f64)]) -> Result<()> {
    for (j, &(lo, hi)) in bands.iter().enumerate() {
        if !(0.0..1.0).contains(&lo) || !(lo < hi && hi <= 1.0) {
            return Err(Error::InvalidArgument(format!("bad band ({lo}, {hi})")));
        }
        if j > 0 && lo < bands[j - 1].1 {
            return Err(Error::InvalidArgument(format!(
                "band ({lo}, {hi}) overlaps its predecessor"
            )));
        }
    }
    Ok(())
}

/// Band-aggregated time series. Nodes `x_i` (`i >= 1`) with
/// `x_lo < x_i <= x_hi` belong to a band.
pub fn band_series(
    state: &EquilibriumState,
    params: &MarketParams,
    side: Side,
    quantity: BandQuantity,
    bands: &[(f64, f64)],
) -> Result<Vec<BandSummary>> {
    validate_bands(bands)?;
    let f = state.density(side);
    let grid = f.space();
    let f0 = f.slice(0);
    let total0: f64 = f0[1..].iter().sum();
    let mut out = Vec::with_capacity(bands.len());
    for &(p_lo, p_hi) in bands {
        let (x_lo, x_hi) = band_edges(params, side, grid.x_max(), p_lo, p_hi)?;
        let members: Vec<usize> = (1..grid.len())
            .filter(|&i| grid.node(i) > x_lo && grid.node(i) <= x_hi)
            .collect();
        if members.is_empty() {
            return Err(Error::EmptyBand { lo: x_lo, hi: x_hi });
        }
        let band0: f64 = members.iter().map(|&i| f0[i]).sum();
        let values = (0..f.time().len())
            .map(|k| {
                let s = f.slice(k);
                let band: f64 = members.iter().map(|&i| s[i]).sum();
                let denom = match quantity {
                    BandQuantity::Survival => band0,
                    BandQuantity::UnmatchedShare => total0,
                };
                if denom > 0.0 {
                    band / denom
                } else {
                    1.0
                }
            })
            .collect();
        out.push(BandSummary {
            p_lo,
            p_hi,
            x_lo,
            x_hi,
            values,
        });
    }
    Ok(out)
}

/// Band-level partner density: the mixture of per-node partner densities
/// weighted by matched mass. Nodes below the mass floor are skipped.
pub fn band_partner_density(
    state: &EquilibriumState,
    params: &MarketParams,
    side: Side,
    band: (f64, f64),
) -> Result<Vec<f64>> {
    validate_bands(&[band])?;
    let grid = state.value(side).space();
    let (x_lo, x_hi) = band_edges(params, side, grid.x_max(), band.0, band.1)?;
    let n_partner = state.value(side.other()).space().len();
    let mut acc = vec![0.0; n_partner];
    let mut weight = 0.0;
    for i in (1..grid.len()).filter(|&i| grid.node(i) > x_lo && grid.node(i) <= x_hi) {
        match partner_density(state, params, i, side) {
            Ok(g) => {
                for (a, v) in acc.iter_mut().zip(&g.density) {
                    *a += g.matched_mass * v;
                }
                weight += g.matched_mass;
            }
            Err(Error::InsufficientMatchedMass { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if weight > 0.0 {
        for a in &mut acc {
            *a /= weight;
        }
    }
    Ok(acc)
}

/// Identifies the build and the configuration behind exported files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Provenance {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.into(),
        }
    }

    pub fn header(&self) -> String {
        format!(
            "# generated-by meanmatch {} config-hash {}\n",
            self.version, self.config_hash
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedFile {
    pub name: String,
    pub description: String,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureManifest {
    pub generated_by: Provenance,
    pub time_slices: Vec<f64>,
    pub bands: Vec<(f64, f64)>,
    pub files: Vec<ExportedFile>,
}

/// Time indices nearest to 0, T/4, T/2, 3T/4 and T.
fn slice_indices(n_t: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = (0..=4).map(|q| ((q * n_t) as f64 / 4.0).round() as usize).collect();
    ks.dedup();
    ks
}

fn slices_csv(field: &SpaceTimeField, ks: &[usize]) -> String {
    let mut out = String::from("x");
    for &k in ks {
        let _ = write!(out, ",t={}", fmt_f64(field.time().node(k)));
    }
    out.push('\n');
    for i in 0..field.space().len() {
        out.push_str(&fmt_f64(field.space().node(i)));
        for &k in ks {
            let _ = write!(out, ",{}", fmt_f64(field.get(i, k)));
        }
        out.push('\n');
    }
    out
}

fn band_label(b: (f64, f64)) -> String {
    format!("p{:.0}-{:.0}", b.0 * 100.0, b.1 * 100.0)
}

/// Write the figure data set into `out_dir` and return its manifest.
pub fn export_figure_data(
    state: &EquilibriumState,
    params: &MarketParams,
    out_dir: &Path,
    provenance: &Provenance,
    bands: &[(f64, f64)],
) -> Result<FigureManifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let time = state.v_a.time();
    let ks = slice_indices(time.n_steps());
    let mut files = Vec::new();
    let mut emit = |name: &str, description: &str, body: String| -> Result<()> {
        let text = format!("{}{}", provenance.header(), body);
        let path = out_dir.join(name);
        fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        files.push(ExportedFile {
            name: name.to_string(),
            description: description.to_string(),
            rows: body.lines().count().saturating_sub(1),
            sha256: hex::encode(Sha256::digest(text.as_bytes())),
        });
        Ok(())
    };

    emit(
        "VA_slices.csv",
        "V_A(x, t) at selected times",
        slices_csv(&state.v_a, &ks),
    )?;
    emit(
        "VB_slices.csv",
        "V_B(y, t) at selected times",
        slices_csv(&state.v_b, &ks),
    )?;
    emit(
        "fA_slices.csv",
        "f_A(x, t) at selected times",
        slices_csv(&state.f_a, &ks),
    )?;
    emit(
        "fB_slices.csv",
        "f_B(y, t) at selected times",
        slices_csv(&state.f_b, &ks),
    )?;

    let mut body = String::from("t,F_A,F_B\n");
    for k in 0..time.len() {
        let _ = writeln!(
            body,
            "{},{},{}",
            fmt_f64(time.node(k)),
            fmt_f64(unmatched_fraction(&state.f_a, k)),
            fmt_f64(unmatched_fraction(&state.f_b, k))
        );
    }
    emit("F.csv", "unmatched fraction of each side over time", body)?;

    let sa = band_series(state, params, Side::A, BandQuantity::Survival, bands)?;
    let sb = band_series(state, params, Side::B, BandQuantity::Survival, bands)?;
    let mut body = String::from("t");
    for (side, series) in [("A", &sa), ("B", &sb)] {
        for b in series.iter() {
            let _ = write!(body, ",{side}_{}", band_label((b.p_lo, b.p_hi)));
        }
    }
    body.push('\n');
    for k in 0..time.len() {
        body.push_str(&fmt_f64(time.node(k)));
        for b in sa.iter().chain(sb.iter()) {
            let _ = write!(body, ",{}", fmt_f64(b.values[k]));
        }
        body.push('\n');
    }
    emit("ratio.csv", "band-averaged f/f0 over time", body)?;

    for (side, name) in [(Side::A, "gA_bands.csv"), (Side::B, "gB_bands.csv")] {
        let partner = state.value(side.other()).space();
        let cols: Vec<Vec<f64>> = bands
            .iter()
            .map(|b| band_partner_density(state, params, side, *b))
            .collect::<Result<_>>()?;
        let mut body = String::from("partner_quality");
        for b in bands {
            let _ = write!(body, ",{}", band_label(*b));
        }
        body.push('\n');
        for l in 0..partner.len() {
            body.push_str(&fmt_f64(partner.node(l)));
            for c in &cols {
                let _ = write!(body, ",{}", fmt_f64(c[l]));
            }
            body.push('\n');
        }
        emit(name, "band partner-quality density", body)?;
    }

    let manifest = FigureManifest {
        generated_by: provenance.clone(),
        time_slices: ks.iter().map(|&k| time.node(k)).collect(),
        bands: bands.to_vec(),
        files,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
