//! Event-driven finite-population simulation of the meeting and matching
//! mechanism under fixed acceptance thresholds, and its comparison with
//! the continuum densities.
//!
//! Agents whose quality lies beyond the grid edge never match and are
//! never acceptable, mirroring the truncated domain of the solver. All
//! unmatched fractions and survival curves are taken over in-domain agents.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::Write;

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::unmatched_fraction;
use crate::error::{Error, Result};
use crate::grid::{fmt_f64, SpaceTimeField};
use crate::income::InitialDensity;
use crate::market::{MarketParams, Side};
use crate::solver::EquilibriumState;

/// How the uniforms fed through the quantile function are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniformScheme {
    #[default]
    Iid,
    /// One uniform per stratum `((i + U) / N)`, a single random shift `U`.
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentPopulation {
    pub side: Side,
    pub qualities: Vec<f64>,
    /// Time of the agent's match; `f64::INFINITY` while unmatched.
    pub match_time: Vec<f64>,
    pub seed: u64,
}

impl AgentPopulation {
    pub fn len(&self) -> usize {
        self.qualities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qualities.is_empty()
    }

    pub fn is_matched(&self, agent: usize, t: f64) -> bool {
        self.match_time[agent] <= t
    }

    pub fn matched_count(&self) -> usize {
        self.match_time.iter().filter(|t| t.is_finite()).count()
    }
}

/// Population whose qualities are `quantile(u)` for the given uniforms.
pub fn population_from_uniforms(
    side: Side,
    density: &InitialDensity,
    uniforms: &[f64],
    seed: u64,
) -> Result<AgentPopulation> {
    let qualities = uniforms
        .iter()
        .map(|u| density.quantile(*u))
        .collect::<Result<Vec<_>>>()?;
    Ok(AgentPopulation {
        side,
        match_time: vec![f64::INFINITY; qualities.len()],
        qualities,
        seed,
    })
}

/// Sample `n` unmatched agents from `density`; deterministic per seed.
pub fn sample_population(
    side: Side,
    density: &InitialDensity,
    n: usize,
    seed: u64,
    scheme: UniformScheme,
) -> Result<AgentPopulation> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let uniforms: Vec<f64> = match scheme {
        UniformScheme::Iid => (0..n).map(|_| rng.sample(Open01)).collect(),
        UniformScheme::Stratified => {
            let shift: f64 = rng.sample(Open01);
            (0..n).map(|i| (i as f64 + shift) / n as f64).collect()
        }
    };
    population_from_uniforms(side, density, &uniforms, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// A ring draws a partner record from the other side's current
    /// population; only the initiating agent's status changes on a match.
    #[default]
    MeanFieldSampling,
    /// Both agents leave the market on a match. Not the continuum limit of
    /// the density equations; kept for contrast.
    PhysicalPairing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeInterpolation {
    /// Threshold at the nearest time node to the left.
    #[default]
    NearestLeft,
    Linear,
}

/// Acceptance threshold `V(q, t)` evaluated off-grid: linear in quality,
/// piecewise constant or linear in time, `+inf` beyond the grid edge.
#[derive(Debug, Clone)]
pub struct Thresholds {
    field: SpaceTimeField,
    interp: TimeInterpolation,
}

impl Thresholds {
    pub fn new(field: SpaceTimeField, interp: TimeInterpolation) -> Self {
        Thresholds { field, interp }
    }

    pub fn field(&self) -> &SpaceTimeField {
        &self.field
    }

    fn at_level(&self, q: f64, k: usize) -> f64 {
        let grid = self.field.space();
        let pos = q / grid.dx();
        let j = (pos.floor() as usize).min(grid.n_cells() - 1);
        let w = pos - j as f64;
        let s = self.field.slice(k);
        s[j] + w * (s[j + 1] - s[j])
    }

    pub fn eval(&self, q: f64, t: f64) -> f64 {
        if !(q <= self.field.space().x_max()) {
            return f64::INFINITY;
        }
        let q = q.max(0.0);
        let time = self.field.time();
        let k = time.left_index(t);
        match self.interp {
            TimeInterpolation::NearestLeft => self.at_level(q, k),
            TimeInterpolation::Linear if k < time.n_steps() => {
                let w = ((t - time.node(k)) / time.dt()).clamp(0.0, 1.0);
                (1.0 - w) * self.at_level(q, k) + w * self.at_level(q, k + 1)
            }
            TimeInterpolation::Linear => self.at_level(q, k),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub agents_per_side: usize,
    pub seed: u64,
    pub thresholds_a: Thresholds,
    pub thresholds_b: Thresholds,
    pub params: MarketParams,
    pub mode: SimMode,
    pub scheme: UniformScheme,
    pub record_events: bool,
}

impl SimConfig {
    /// Thresholds taken from a solved state, nearest-left in time.
    pub fn from_state(state: &EquilibriumState, params: &MarketParams, agents_per_side: usize, seed: u64) -> Self {
        SimConfig {
            agents_per_side,
            seed,
            thresholds_a: Thresholds::new(state.v_a.clone(), TimeInterpolation::NearestLeft),
            thresholds_b: Thresholds::new(state.v_b.clone(), TimeInterpolation::NearestLeft),
            params: params.clone(),
            mode: SimMode::MeanFieldSampling,
            scheme: UniformScheme::Iid,
            record_events: false,
        }
    }

    fn thresholds(&self, side: Side) -> &Thresholds {
        match side {
            Side::A => &self.thresholds_a,
            Side::B => &self.thresholds_b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents_per_side == 0 {
            return Err(Error::InvalidArgument("agents_per_side must be >= 1".into()));
        }
        self.params.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Matched,
    /// The drawn partner record had already matched.
    FailedStatus,
    /// The pair was not mutually acceptable.
    FailedThreshold,
}

impl Outcome {
    pub fn label(self) -> &'static str {
        match self {
            Outcome::Matched => "matched",
            Outcome::FailedStatus => "failed_status",
            Outcome::FailedThreshold => "failed_threshold",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub time: f64,
    pub side: Side,
    pub agent_id: usize,
    pub partner_quality: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MeetingCounts {
    pub meetings: usize,
    pub failed_status: usize,
    pub failed_threshold: usize,
    pub matches: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimResult {
    pub replicate: usize,
    pub a: AgentPopulation,
    pub b: AgentPopulation,
    pub counts_a: MeetingCounts,
    pub counts_b: MeetingCounts,
    pub events: Vec<Event>,
}

impl SimResult {
    pub fn population(&self, side: Side) -> &AgentPopulation {
        match side {
            Side::A => &self.a,
            Side::B => &self.b,
        }
    }

    pub fn counts(&self, side: Side) -> &MeetingCounts {
        match side {
            Side::A => &self.counts_a,
            Side::B => &self.counts_b,
        }
    }
}

/// Seed of a named sub-stream of the run seed.
fn sub_seed(seed: u64, replicate: usize, purpose: u64) -> u64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((replicate as u64) << 8) | purpose);
    rng.random()
}

const STREAM_POP_A: u64 = 1;
const STREAM_POP_B: u64 = 2;
const STREAM_CLOCKS: u64 = 3;

fn exp_time(rng: &mut ChaCha20Rng, rate: f64) -> f64 {
    let u: f64 = rng.sample(Open01);
    -u.ln() / rate
}

/// Run one replicate of the market up to the horizon.
pub fn simulate_market(config: &SimConfig, replicate: usize) -> Result<SimResult> {
    config.validate()?;
    let n = config.agents_per_side;
    let params = &config.params;
    let mut pops = [
        sample_population(
            Side::A,
            &params.side_a.initial_density,
            n,
            sub_seed(config.seed, replicate, STREAM_POP_A),
            config.scheme,
        )?,
        sample_population(
            Side::B,
            &params.side_b.initial_density,
            n,
            sub_seed(config.seed, replicate, STREAM_POP_B),
            config.scheme,
        )?,
    ];
    let horizon = params.horizon;
    let mut rng = ChaCha20Rng::seed_from_u64(sub_seed(config.seed, replicate, STREAM_CLOCKS));
    // side I rings at the other side's intensity
    let rates = [params.side_b.intensity, params.side_a.intensity];
    let x_max = [
        config.thresholds_a.field().space().x_max(),
        config.thresholds_b.field().space().x_max(),
    ];
    let mut heap = BinaryHeap::new();
    for s in 0..2 {
        if rates[s] <= 0.0 {
            continue;
        }
        for (id, q) in pops[s].qualities.iter().enumerate() {
            if *q > x_max[s] {
                continue;
            }
            let t = exp_time(&mut rng, rates[s]);
            if t < horizon {
                // nonnegative f64 bit patterns sort like the values
                heap.push(Reverse((t.to_bits(), s as u8, id)));
            }
        }
    }

    let mut counts = [MeetingCounts::default(); 2];
    let mut events = Vec::new();
    let sides = [Side::A, Side::B];
    while let Some(Reverse((bits, s, id))) = heap.pop() {
        let s = s as usize;
        let o = 1 - s;
        let t = f64::from_bits(bits);
        if pops[s].match_time[id].is_finite() {
            continue;
        }
        let x = pops[s].qualities[id];
        let j = rng.random_range(0..pops[o].len());
        let y = pops[o].qualities[j];
        let outcome = if pops[o].match_time[j] <= t {
            Outcome::FailedStatus
        } else if y >= config.thresholds(sides[s]).eval(x, t) && x >= config.thresholds(sides[o]).eval(y, t) {
            Outcome::Matched
        } else {
            Outcome::FailedThreshold
        };
        let c = &mut counts[s];
        c.meetings += 1;
        match outcome {
            Outcome::Matched => {
                c.matches += 1;
                pops[s].match_time[id] = t;
                if config.mode == SimMode::PhysicalPairing {
                    pops[o].match_time[j] = t;
                }
            }
            Outcome::FailedStatus => c.failed_status += 1,
            Outcome::FailedThreshold => c.failed_threshold += 1,
        }
        if outcome != Outcome::Matched {
            let next = t + exp_time(&mut rng, rates[s]);
            if next < horizon {
                heap.push(Reverse((next.to_bits(), s as u8, id)));
            }
        }
        if config.record_events {
            events.push(Event {
                time: t,
                side: sides[s],
                agent_id: id,
                partner_quality: y,
                outcome,
            });
        }
    }
    let [a, b] = pops;
    Ok(SimResult {
        replicate,
        a,
        b,
        counts_a: counts[0],
        counts_b: counts[1],
        events,
    })
}

/// Independent replicates `0..replicates`, run in parallel. Results do not
/// depend on scheduling order.
pub fn run_replicates(config: &SimConfig, replicates: usize) -> Result<Vec<SimResult>> {
    (0..replicates)
        .into_par_iter()
        .map(|r| simulate_market(config, r))
        .collect()
}

pub fn write_event_log(out: &mut impl Write, events: &[Event]) -> std::io::Result<()> {
    writeln!(out, "time,side,agent_id,partner_quality,outcome")?;
    for e in events {
        writeln!(
            out,
            "{},{},{},{},{}",
            fmt_f64(e.time),
            e.side.label(),
            e.agent_id,
            fmt_f64(e.partner_quality),
            e.outcome.label()
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinSurvival {
    pub lo: f64,
    pub hi: f64,
    /// Agents (or, for the continuum curve, grid nodes) in `(lo, hi]`.
    pub count: usize,
    /// Survival at each time; empty when the bin is empty.
    pub survival: Vec<f64>,
    pub std_err: Vec<f64>,
}

impl BinSurvival {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalCurves {
    pub side: Side,
    pub times: Vec<f64>,
    /// Unmatched fraction of the in-domain population at each time.
    pub unmatched: Vec<f64>,
    pub bins: Vec<BinSurvival>,
}

fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).max(0.0).sqrt()
}

/// Survival curves of pooled populations: per bin `(lo, hi]` of quality and
/// time `t`, the fraction of agents with `match_time > t`.
pub fn empirical_survival(
    pops: &[&AgentPopulation],
    edges: &[f64],
    times: &[f64],
    x_max: f64,
) -> Result<SurvivalCurves> {
    let side = pops
        .first()
        .ok_or_else(|| Error::InvalidArgument("no populations".into()))?
        .side;
    if edges.len() < 2 || edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("bin edges must increase strictly".into()));
    }
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); edges.len() - 1];
    let mut all = Vec::new();
    for p in pops {
        for (q, m) in p.qualities.iter().zip(&p.match_time) {
            if *q > x_max {
                continue;
            }
            all.push(*m);
            let b = edges.partition_point(|e| e < q);
            if b >= 1 && b < edges.len() {
                per_bin[b - 1].push(*m);
            }
        }
    }
    let surviving = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|m| *m <= t);
    all.sort_by(f64::total_cmp);
    let unmatched = times
        .iter()
        .map(|t| {
            if all.is_empty() {
                1.0
            } else {
                surviving(&all, *t) as f64 / all.len() as f64
            }
        })
        .collect();
    let bins = per_bin
        .into_iter()
        .enumerate()
        .map(|(b, mut ms)| {
            ms.sort_by(f64::total_cmp);
            let n = ms.len();
            let (survival, std_err) = if n == 0 {
                (Vec::new(), Vec::new())
            } else {
                let s: Vec<f64> = times.iter().map(|t| surviving(&ms, *t) as f64 / n as f64).collect();
                let e = s.iter().map(|p| binomial_se(*p, n)).collect();
                (s, e)
            };
            BinSurvival {
                lo: edges[b],
                hi: edges[b + 1],
                count: n,
                survival,
                std_err,
            }
        })
        .collect();
    Ok(SurvivalCurves {
        side,
        times: times.to_vec(),
        unmatched,
        bins,
    })
}

/// The continuum counterpart of [`empirical_survival`] at time nodes
/// `t_indices`: population-weighted band survival and the unmatched fraction.
pub fn pde_survival(state: &EquilibriumState, side: Side, edges: &[f64], t_indices: &[usize]) -> SurvivalCurves {
    let f = state.density(side);
    let grid = f.space();
    let f0 = f.slice(0);
    let bins = edges
        .windows(2)
        .map(|w| {
            let members: Vec<usize> = (1..grid.len())
                .filter(|&i| grid.node(i) > w[0] && grid.node(i) <= w[1])
                .collect();
            let base: f64 = members.iter().map(|&i| f0[i]).sum();
            let survival = if members.is_empty() {
                Vec::new()
            } else {
                t_indices
                    .iter()
                    .map(|&k| {
                        let s = f.slice(k);
                        if base > 0.0 {
                            members.iter().map(|&i| s[i]).sum::<f64>() / base
                        } else {
                            1.0
                        }
                    })
                    .collect()
            };
            BinSurvival {
                lo: w[0],
                hi: w[1],
                count: members.len(),
                std_err: vec![0.0; survival.len()],
                survival,
            }
        })
        .collect();
    SurvivalCurves {
        side,
        times: t_indices.iter().map(|&k| f.time().node(k)).collect(),
        unmatched: t_indices.iter().map(|&k| unmatched_fraction(f, k)).collect(),
        bins,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SideComparison {
    pub side: Side,
    pub max_abs_dev_f: f64,
    pub cells: usize,
    pub cells_within_3se: usize,
    pub fraction_within_3se: f64,
    /// Mean absolute survival difference over the compared cells.
    pub l1_survival_distance: f64,
    pub empty_bins: usize,
}

/// Compare a simulated curve set with a reference one on the same bins and
/// times. A cell is within tolerance when the difference is at most three
/// binomial standard errors, the error taken at the larger of the two
/// survival values' binomial variances.
pub fn compare_curves(sim: &SurvivalCurves, reference: &SurvivalCurves) -> Result<SideComparison> {
    if sim.times.len() != reference.times.len() || sim.bins.len() != reference.bins.len() {
        return Err(Error::InvalidArgument("curve sets differ in shape".into()));
    }
    let max_abs_dev_f = sim
        .unmatched
        .iter()
        .zip(&reference.unmatched)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let (mut cells, mut within, mut l1, mut empty) = (0, 0, 0.0, 0);
    for (s, r) in sim.bins.iter().zip(&reference.bins) {
        if s.is_empty() || r.is_empty() {
            empty += 1;
            continue;
        }
        for (ps, pr) in s.survival.iter().zip(&r.survival) {
            let se = binomial_se(*pr, s.count).max(binomial_se(*ps, s.count));
            let d = (ps - pr).abs();
            cells += 1;
            l1 += d;
            if d <= 3.0 * se || d == 0.0 {
                within += 1;
            }
        }
    }
    Ok(SideComparison {
        side: sim.side,
        max_abs_dev_f,
        cells,
        cells_within_3se: within,
        fraction_within_3se: if cells > 0 { within as f64 / cells as f64 } else { 1.0 },
        l1_survival_distance: if cells > 0 { l1 / cells as f64 } else { 0.0 },
        empty_bins: empty,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub replicates: usize,
    pub agents_per_side: usize,
    pub n_bins: usize,
    pub max_abs_dev_f: f64,
    pub fraction_within_3se: f64,
    pub l1_survival_distance: f64,
    pub sides: Vec<SideComparison>,
}

impl ComparisonReport {
    /// At least `min_fraction` of cells within 3 SE on every side.
    pub fn passes(&self, min_fraction: f64) -> bool {
        self.sides.iter().all(|s| s.fraction_within_3se >= min_fraction)
    }
}

/// Equal-probability quality bins of the domain-conditioned initial law.
pub fn equal_probability_edges(density: &InitialDensity, n_bins: usize, x_max: f64) -> Result<Vec<f64>> {
    if n_bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let mut edges = vec![0.0];
    for b in 1..n_bins {
        edges.push(density.truncated_quantile(b as f64 / n_bins as f64, x_max)?);
    }
    edges.push(x_max);
    Ok(edges)
}

/// Pool replicates and compare with the solved state on `n_bins`
/// equal-probability bins at every time node after the start.
pub fn compare_to_pde(
    results: &[SimResult],
    state: &EquilibriumState,
    params: &MarketParams,
    n_bins: usize,
) -> Result<ComparisonReport> {
    let first = results
        .first()
        .ok_or_else(|| Error::InvalidArgument("no simulation results".into()))?;
    let time = state.v_a.time();
    let t_indices: Vec<usize> = (1..time.len()).collect();
    let times: Vec<f64> = t_indices.iter().map(|&k| time.node(k)).collect();
    let mut sides = Vec::new();
    for side in [Side::A, Side::B] {
        let x_max = state.density(side).space().x_max();
        let edges = equal_probability_edges(&params.side(side).initial_density, n_bins, x_max)?;
        let pops: Vec<&AgentPopulation> = results.iter().map(|r| r.population(side)).collect();
        let sim = empirical_survival(&pops, &edges, &times, x_max)?;
        let reference = pde_survival(state, side, &edges, &t_indices);
        sides.push(compare_curves(&sim, &reference)?);
    }
    let cells: usize = sides.iter().map(|s| s.cells).sum();
    let within: usize = sides.iter().map(|s| s.cells_within_3se).sum();
    Ok(ComparisonReport {
        replicates: results.len(),
        agents_per_side: first.a.len(),
        n_bins,
        max_abs_dev_f: sides.iter().map(|s| s.max_abs_dev_f).fold(0.0, f64::max),
        fraction_within_3se: if cells > 0 { within as f64 / cells as f64 } else { 1.0 },
        l1_survival_distance: sides
            .iter()
            .map(|s| s.l1_survival_distance * s.cells as f64)
            .sum::<f64>()
            / cells.max(1) as f64,
        sides,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{SpatialGrid, TimeGrid};
    use crate::income::{gpareto_quantile, GeneralizedParetoParams};
    use crate::market::{Grids, Utility};
    use crate::solver::{solve_fixed_point, SolverOptions};

    fn gp() -> (GeneralizedParetoParams, InitialDensity) {
        let p = GeneralizedParetoParams {
            beta: 8.6348,
            mu: 459.4388,
            sigma: 835.2216,
        };
        (p, InitialDensity::GeneralizedPareto(p))
    }

    fn constant_thresholds(value: f64, n_t: usize) -> Thresholds {
        let g = SpatialGrid::new(7000.0, 10).unwrap();
        let t = TimeGrid::new(1.0, n_t).unwrap();
        Thresholds::new(
            SpaceTimeField::from_fn(&g, &t, |_, _| value),
            TimeInterpolation::NearestLeft,
        )
    }

    fn config(value: f64, n: usize) -> SimConfig {
        SimConfig {
            agents_per_side: n,
            seed: 7,
            thresholds_a: constant_thresholds(value, 10),
            thresholds_b: constant_thresholds(value, 10),
            params: MarketParams::labor_market(),
            mode: SimMode::MeanFieldSampling,
            scheme: UniformScheme::Iid,
            record_events: true,
        }
    }

    #[test]
    fn forced_median_sample() {
        let (p, d) = gp();
        let pop = population_from_uniforms(Side::B, &d, &[0.5], 0).unwrap();
        assert_eq!(pop.qualities[0], gpareto_quantile(&p, 0.5).unwrap());
        assert!((pop.qualities[0] - 1062.0).abs() < 1.0, "{}", pop.qualities[0]);
        assert!(pop.match_time[0].is_infinite());
    }

    #[test]
    fn sample_mean_matches_quadrature() {
        let (_, d) = gp();
        let n = 100_000;
        let pop = sample_population(Side::B, &d, n, 11, UniformScheme::Iid).unwrap();
        let mean = pop.qualities.iter().sum::<f64>() / n as f64;
        let var = pop.qualities.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // trapezoid quadrature of y f(y) plus an analytic tail beyond the cut
        let (cut, steps) = (2.0e5, 2_000_000);
        let h = cut / steps as f64;
        let mut integral = 0.0;
        for s in 0..=steps {
            let y = s as f64 * h;
            let w = if s == 0 || s == steps { 0.5 } else { 1.0 };
            integral += w * y * d.pdf(y);
        }
        integral *= h;
        assert!(
            (mean - integral).abs() < 3.0 * (var / n as f64).sqrt(),
            "{mean} vs {integral}"
        );
        let again = sample_population(Side::B, &d, n, 11, UniformScheme::Iid).unwrap();
        assert_eq!(pop, again);
        let strat = sample_population(Side::B, &d, 1000, 11, UniformScheme::Stratified).unwrap();
        assert!(strat.qualities.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_intensity_means_no_events() {
        let mut c = config(0.0, 500);
        c.params.side_a.intensity = 0.0;
        c.params.side_b.intensity = 0.0;
        let r = simulate_market(&c, 0).unwrap();
        assert!(r.events.is_empty());
        assert_eq!(r.a.matched_count() + r.b.matched_count(), 0);
    }

    #[test]
    fn infinite_thresholds_block_matching() {
        let c = config(f64::INFINITY, 500);
        let r = simulate_market(&c, 0).unwrap();
        assert!(!r.events.is_empty());
        assert_eq!(r.a.matched_count() + r.b.matched_count(), 0);
        assert!(r.events.iter().all(|e| e.outcome == Outcome::FailedThreshold));
    }

    #[test]
    fn zero_thresholds_give_exponential_survival() {
        // single A agent against a B population that never depletes
        let c_rate = 1.5;
        let mut c = config(0.0, 1);
        c.params.side_b.intensity = c_rate;
        c.params.side_a.intensity = 0.0;
        c.record_events = false;
        let reps = 4000;
        let results = run_replicates(&c, reps).unwrap();
        let unmatched = results
            .iter()
            .filter(|r| r.a.qualities[0] > 7000.0 || r.a.match_time[0].is_infinite())
            .count() as f64;
        let in_domain = results.iter().filter(|r| r.a.qualities[0] <= 7000.0).count() as f64;
        let out = reps as f64 - in_domain;
        let p_hat = (unmatched - out) / in_domain;
        let p = (-c_rate).exp();
        let se = (p * (1.0 - p) / in_domain).sqrt();
        assert!((p_hat - p).abs() < 3.0 * se, "{p_hat} vs {p}");
    }

    #[test]
    fn frozen_partner_side_hazard_identity() {
        // B never rings; with zero thresholds every in-domain A meets an
        // in-domain B at rate lambda_B * P(B in domain)
        let mut c = config(0.0, 20_000);
        c.params.side_a.intensity = 0.0;
        let r = simulate_market(&c, 3).unwrap();
        let d = &c.params.side_b.initial_density;
        let hazard = c.params.side_b.intensity * d.cdf(7000.0);
        let emp = empirical_survival(&[&r.a], &[0.0, 7000.0], &[0.05, 0.1], 7000.0).unwrap();
        for (t, s) in emp.times.iter().zip(&emp.unmatched) {
            let p = (-hazard * t).exp();
            let n = emp.bins[0].count as f64;
            assert!((s - p).abs() < 4.0 * (p * (1.0 - p) / n).sqrt(), "{s} vs {p}");
        }
    }

    #[test]
    fn failed_meeting_accounting() {
        // thresholds accept everything in-domain; failed-status share among
        // A meetings tracks the matched share of B
        let c = config(0.0, 20_000);
        let r = simulate_market(&c, 1).unwrap();
        for e in &r.events {
            if e.side == Side::A && e.outcome == Outcome::Matched {
                assert!(e.partner_quality <= 7000.0);
            }
        }
        let ca = r.counts(Side::A);
        assert_eq!(ca.meetings, ca.matches + ca.failed_status + ca.failed_threshold);
        assert_eq!(ca.meetings, r.events.iter().filter(|e| e.side == Side::A).count());
        // effective meetings of A agents happen at rate lambda_B * F_B(t)
        let (t0, t1) = (0.0, 0.02);
        let b_times: Vec<f64> = r.b.match_time.clone();
        let window: Vec<&Event> = r
            .events
            .iter()
            .filter(|e| e.side == Side::A && e.time >= t0 && e.time < t1)
            .collect();
        let effective = window.iter().filter(|e| e.outcome != Outcome::FailedStatus).count() as f64;
        let total = window.len() as f64;
        let f_b_mid = b_times.iter().filter(|m| **m > 0.5 * (t0 + t1)).count() as f64 / b_times.len() as f64;
        let se = (f_b_mid * (1.0 - f_b_mid) / total).sqrt();
        assert!(
            (effective / total - f_b_mid).abs() < 4.0 * se + 0.02,
            "{} vs {f_b_mid}",
            effective / total
        );
    }

    #[test]
    fn status_is_monotone_and_log_consistent() {
        let c = config(0.0, 2000);
        let r = simulate_market(&c, 0).unwrap();
        let mut seen = std::collections::HashSet::new();
        let mut last = 0.0;
        for e in &r.events {
            assert!(e.time >= last);
            last = e.time;
            // no agent acts after matching
            assert!(!seen.contains(&(e.side, e.agent_id)));
            if e.outcome == Outcome::Matched {
                seen.insert((e.side, e.agent_id));
                assert_eq!(r.population(e.side).match_time[e.agent_id], e.time);
            }
        }
        let mut buf = Vec::new();
        write_event_log(&mut buf, &r.events).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time,side,agent_id,partner_quality,outcome\n"));
        assert_eq!(text.lines().count(), r.events.len() + 1);
    }

    #[test]
    fn physical_pairing_depletes_faster() {
        let mut c = config(0.0, 5000);
        c.record_events = false;
        let mf = simulate_market(&c, 0).unwrap();
        c.mode = SimMode::PhysicalPairing;
        let pp = simulate_market(&c, 0).unwrap();
        assert!(pp.b.matched_count() > mf.b.matched_count());
    }

    #[test]
    fn deterministic_and_order_independent() {
        let mut c = config(0.0, 3000);
        c.record_events = false;
        let all = run_replicates(&c, 4).unwrap();
        let third = simulate_market(&c, 2).unwrap();
        assert_eq!(all[2].a, third.a);
        assert_eq!(all[2].b, third.b);
        assert_ne!(all[0].a, all[1].a);
    }

    #[test]
    fn empirical_survival_basics() {
        let pop = AgentPopulation {
            side: Side::A,
            qualities: vec![1.0, 2.0, 3.0, 4.0, 9.0],
            match_time: vec![0.5, f64::INFINITY, 0.2, f64::INFINITY, 0.1],
            seed: 0,
        };
        let s = empirical_survival(&[&pop], &[0.0, 2.0, 4.0, 6.0], &[0.0, 0.3, 1.0], 8.0).unwrap();
        assert_eq!(s.unmatched, vec![1.0, 0.75, 0.5]);
        assert_eq!(s.bins[0].survival, vec![1.0, 1.0, 0.5]);
        assert_eq!(s.bins[1].survival, vec![1.0, 0.5, 0.5]);
        assert!(s.bins[2].is_empty());
        assert!((s.bins[0].std_err[2] - 0.5f64.powi(2).sqrt() / 2f64.sqrt()).abs() < 1e-12);
    }

    fn coupled() -> (MarketParams, EquilibriumState) {
        let mut params = MarketParams::labor_market();
        params.side_a.intensity = 4.0;
        params.side_b.intensity = 5.0;
        let grids = Grids::new(7000.0, 60, 60, 1.0, 50).unwrap();
        let s = solve_fixed_point(&params, &grids, &SolverOptions::default()).unwrap();
        (params, s)
    }

    #[test]
    fn continuum_against_itself_has_zero_deviation() {
        let (params, s) = coupled();
        let edges = equal_probability_edges(&params.side_a.initial_density, 5, 7000.0).unwrap();
        let ks: Vec<usize> = (1..=50).collect();
        let c = pde_survival(&s, Side::A, &edges, &ks);
        let cmp = compare_curves(&c, &c).unwrap();
        assert_eq!(cmp.max_abs_dev_f, 0.0);
        assert_eq!(cmp.l1_survival_distance, 0.0);
        assert_eq!(cmp.fraction_within_3se, 1.0);
    }

    #[test]
    fn no_match_regime_has_zero_deviation() {
        let mut params = MarketParams::labor_market();
        for side in [&mut params.side_a, &mut params.side_b] {
            side.terminal = Utility::linear(2.0);
            side.running = Utility::linear(0.08);
        }
        let grids = Grids::new(7000.0, 60, 60, 1.0, 20).unwrap();
        let s = solve_fixed_point(&params, &grids, &SolverOptions::default()).unwrap();
        let c = SimConfig::from_state(&s, &params, 2000, 5);
        let results = run_replicates(&c, 2).unwrap();
        assert!(results.iter().all(|r| r.a.matched_count() + r.b.matched_count() == 0));
        let report = compare_to_pde(&results, &s, &params, 20).unwrap();
        assert_eq!(report.max_abs_dev_f, 0.0);
        assert_eq!(report.fraction_within_3se, 1.0);
    }

    #[test]
    fn coupled_run_agrees_with_continuum() {
        // spatial resolution dominates the gap, so use a fine quality grid
        let mut params = MarketParams::labor_market();
        params.side_a.intensity = 4.0;
        params.side_b.intensity = 5.0;
        let grids = Grids::new(7000.0, 240, 240, 1.0, 50).unwrap();
        let s = solve_fixed_point(&params, &grids, &SolverOptions::default()).unwrap();
        assert!(s.converged);
        let c = SimConfig::from_state(&s, &params, 20_000, 9);
        let results = run_replicates(&c, 2).unwrap();
        let report = compare_to_pde(&results, &s, &params, 10).unwrap();
        assert!(report.max_abs_dev_f < 0.02, "{report:?}");
    }

    proptest::proptest! {
        #[test]
        fn survival_is_bounded_and_nonincreasing(
            cells in proptest::collection::vec((0.0f64..10.0, proptest::option::of(0.0f64..1.0)), 1..200)
        ) {
            let pop = AgentPopulation {
                side: Side::B,
                qualities: cells.iter().map(|c| c.0).collect(),
                match_time: cells.iter().map(|c| c.1.unwrap_or(f64::INFINITY)).collect(),
                seed: 0,
            };
            let times: Vec<f64> = (0..=10).map(|j| j as f64 / 10.0).collect();
            let s = empirical_survival(&[&pop], &[0.0, 2.5, 5.0, 7.5, 10.0], &times, 10.0).unwrap();
            let curves = std::iter::once(&s.unmatched).chain(s.bins.iter().map(|b| &b.survival));
            for c in curves {
                proptest::prop_assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
                proptest::prop_assert!(c.windows(2).all(|w| w[1] <= w[0]));
            }
            let counted: usize = s.bins.iter().map(|b| b.count).sum();
            proptest::prop_assert_eq!(counted, cells.iter().filter(|c| c.0 > 0.0).count());
        }
    }

    #[test]
    fn thresholds_interpolate_and_cap_domain() {
        let g = SpatialGrid::new(10.0, 10).unwrap();
        let t = TimeGrid::new(1.0, 4).unwrap();
        let th = Thresholds::new(
            SpaceTimeField::from_fn(&g, &t, |x, s| x + 10.0 * s),
            TimeInterpolation::NearestLeft,
        );
        assert!((th.eval(2.5, 0.3) - (2.5 + 2.5)).abs() < 1e-12);
        assert!(th.eval(10.5, 0.3).is_infinite());
        let lin = Thresholds::new(th.field().clone(), TimeInterpolation::Linear);
        assert!((lin.eval(2.5, 0.3) - 5.5).abs() < 1e-12);
        assert!((lin.eval(10.0, 1.0) - 20.0).abs() < 1e-12);
    }
}
