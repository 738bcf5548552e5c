//! Fixed-point finite-difference solver for the coupled value (backward) and
//! density (forward) equations of the two-sided matching market.
//!
//! Each iteration recomputes, from the current iterate only, the matched mass
//! and the first moment of the surplus over every matching region, then
//! updates the value functions backward in time and the densities forward in
//! time with implicit-Euler steps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{interpolate_time_slice, SpaceTimeField, SpatialGrid};
use crate::market::{Grids, MarketParams, Side};

/// Relative tolerance (times `max(1, max|V|)`) below which a decrease of a
/// value slice in quality is treated as rounding noise.
pub const MONOTONE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Every update reads iterate-n data only.
    #[default]
    Jacobi,
    /// Value rows reuse the already-updated later time level and density rows
    /// the already-updated earlier one, within the same sweep.
    GaussSeidelInTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub denominator_floor: f64,
    pub sweep_mode: SweepMode,
    pub damping: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-4,
            max_iters: 5000,
            denominator_floor: 1e-12,
            sweep_mode: SweepMode::Jacobi,
            damping: 1.0,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be > 0, got {}", self.tol)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if !(self.denominator_floor.is_finite() && self.denominator_floor > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "denominator_floor must be > 0, got {}",
                self.denominator_floor
            )));
        }
        Ok(())
    }
}

/// The four terms of the total relative error between successive iterates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResidualTerms {
    pub e_va: f64,
    pub e_vb: f64,
    pub e_fa: f64,
    pub e_fb: f64,
}

impl ResidualTerms {
    pub fn total(&self) -> f64 {
        self.e_va + self.e_vb + self.e_fa + self.e_fb
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumState {
    pub v_a: SpaceTimeField,
    pub v_b: SpaceTimeField,
    pub f_a: SpaceTimeField,
    pub f_b: SpaceTimeField,
    pub iteration: usize,
    pub residual: f64,
    pub converged: bool,
    /// One entry per iteration, in order.
    pub trace: Vec<ResidualTerms>,
}

impl EquilibriumState {
    /// The initial iterate: every time level of `V_I` equals the terminal
    /// utility and every time level of `f_I` equals the initial density.
    pub fn initial(params: &MarketParams, grids: &Grids) -> Result<Self> {
        let (a, b) = (
            SideData::new(params, grids, Side::A)?,
            SideData::new(params, grids, Side::B)?,
        );
        Ok(EquilibriumState {
            v_a: SpaceTimeField::from_profile(&grids.a, &grids.time, &a.terminal)?,
            v_b: SpaceTimeField::from_profile(&grids.b, &grids.time, &b.terminal)?,
            f_a: SpaceTimeField::from_profile(&grids.a, &grids.time, &a.initial)?,
            f_b: SpaceTimeField::from_profile(&grids.b, &grids.time, &b.initial)?,
            iteration: 0,
            residual: f64::INFINITY,
            converged: false,
            trace: Vec::new(),
        })
    }

    pub fn value(&self, side: Side) -> &SpaceTimeField {
        match side {
            Side::A => &self.v_a,
            Side::B => &self.v_b,
        }
    }

    pub fn density(&self, side: Side) -> &SpaceTimeField {
        match side {
            Side::A => &self.f_a,
            Side::B => &self.f_b,
        }
    }

    pub fn grids(&self) -> Grids {
        Grids {
            a: self.v_a.space().clone(),
            b: self.v_b.space().clone(),
            time: self.v_a.time().clone(),
        }
    }
}

/// Per-side data sampled on the grid.
#[derive(Debug, Clone)]
struct SideData {
    /// Meeting intensity of the opposite side.
    partner_rate: f64,
    running: Vec<f64>,
    terminal: Vec<f64>,
    initial: Vec<f64>,
}

impl SideData {
    fn new(params: &MarketParams, grids: &Grids, side: Side) -> Result<Self> {
        let own = params.side(side);
        let grid = grids.side(side);
        let initial: Vec<f64> = grid.nodes().iter().map(|x| own.initial_density.pdf(*x)).collect();
        if let Some(i) = initial.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NonFinite {
                field: side_field(side, "f0"),
                i,
                k: 0,
            });
        }
        Ok(SideData {
            partner_rate: params.side(side.other()).intensity,
            running: own.running.profile(grid),
            terminal: own.terminal.profile(grid),
            initial,
        })
    }
}

fn side_field(side: Side, what: &str) -> &'static str {
    match (side, what) {
        (Side::A, "V") => "V_A",
        (Side::B, "V") => "V_B",
        (Side::A, "f") => "f_A",
        (Side::B, "f") => "f_B",
        (Side::A, _) => "f_A0",
        (Side::B, _) => "f_B0",
    }
}

/// Checks that `slice` is nondecreasing up to [`MONOTONE_TOL`]. Returns
/// whether it is exactly nondecreasing.
fn check_monotone(slice: &[f64], field: &'static str, t_index: usize) -> Result<bool> {
    let scale = slice.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut exact = true;
    for (j, w) in slice.windows(2).enumerate() {
        let drop = w[0] - w[1];
        if drop > 0.0 {
            if drop > MONOTONE_TOL * scale {
                return Err(Error::NonMonotone {
                    field,
                    t_index,
                    node: j + 1,
                    drop,
                });
            }
            exact = false;
        }
    }
    Ok(exact)
}

/// Matched mass and surplus first moment over one matching region:
/// node `y_l` (l >= 1) belongs iff `v_self <= y_l` and `v_other[l] <= x`.
/// Both sums are right-endpoint Riemann sums scaled by `dy`.
fn region_sums(
    x: f64,
    v_self: f64,
    y_nodes: &[f64],
    dy: f64,
    v_other: &[f64],
    f_other: &[f64],
    monotone: bool,
) -> (f64, f64) {
    let mut mass = 0.0;
    let mut moment = 0.0;
    if monotone {
        // Members form a contiguous run: y_l >= v_self is a suffix and
        // v_other[l] <= x a prefix.
        let lo = y_nodes.partition_point(|y| *y < v_self).max(1);
        let hi = v_other.partition_point(|v| *v <= x);
        for l in lo..hi {
            mass += f_other[l];
            moment += (y_nodes[l] - v_self) * f_other[l];
        }
    } else {
        for l in 1..y_nodes.len() {
            if v_self <= y_nodes[l] && v_other[l] <= x {
                mass += f_other[l];
                moment += (y_nodes[l] - v_self) * f_other[l];
            }
        }
    }
    (mass * dy, moment * dy)
}

/// Matched mass and first moment for every (node, time) cell of one side.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTable {
    pub mass: SpaceTimeField,
    pub moment: SpaceTimeField,
}

/// Region sums of side `side` against the opposite side at every cell.
pub fn region_table(state: &EquilibriumState, side: Side) -> Result<RegionTable> {
    let v_self = state.value(side);
    let v_other = state.value(side.other());
    let f_other = state.density(side.other());
    let x_grid = v_self.space();
    let y_grid = v_other.space();
    let time = v_self.time();
    let other_name = side_field(side.other(), "V");

    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..time.len())
        .into_par_iter()
        .map(|k| {
            let vo = v_other.slice(k);
            let monotone = check_monotone(vo, other_name, k)?;
            let vs = v_self.slice(k);
            let fo = f_other.slice(k);
            let mut mass = vec![0.0; x_grid.len()];
            let mut moment = vec![0.0; x_grid.len()];
            for (i, &x) in x_grid.nodes().iter().enumerate() {
                let (m, s) = region_sums(x, vs[i], y_grid.nodes(), y_grid.dx(), vo, fo, monotone);
                mass[i] = m;
                moment[i] = s;
            }
            Ok((mass, moment))
        })
        .collect::<Result<_>>()?;

    let mut mass = SpaceTimeField::zeros(x_grid, time);
    let mut moment = SpaceTimeField::zeros(x_grid, time);
    for (k, (m, s)) in rows.into_iter().enumerate() {
        mass.slice_mut(k).copy_from_slice(&m);
        moment.slice_mut(k).copy_from_slice(&s);
    }
    Ok(RegionTable { mass, moment })
}

fn region_at(
    x: f64,
    t_index: usize,
    v_self: &SpaceTimeField,
    v_other: &SpaceTimeField,
    f_other: &SpaceTimeField,
) -> Result<(f64, f64)> {
    if !v_other.same_shape(f_other) || v_self.time() != v_other.time() {
        return Err(Error::InvalidArgument("region fields do not share grids".into()));
    }
    if t_index >= v_self.time().len() {
        return Err(Error::InvalidArgument(format!("time index {t_index} out of range")));
    }
    let vs = interpolate_time_slice(v_self, x, t_index)?;
    let vo = v_other.slice(t_index);
    let monotone = check_monotone(vo, "V_other", t_index)?;
    let y = v_other.space();
    Ok(region_sums(
        x,
        vs,
        y.nodes(),
        y.dx(),
        vo,
        f_other.slice(t_index),
        monotone,
    ))
}

/// Matched mass `dy * sum f_other(y_l)` over the matching region of quality
/// `x` at time level `t_index`.
pub fn region_mass(
    x: f64,
    t_index: usize,
    v_self: &SpaceTimeField,
    v_other: &SpaceTimeField,
    f_other: &SpaceTimeField,
) -> Result<f64> {
    region_at(x, t_index, v_self, v_other, f_other).map(|r| r.0)
}

/// Surplus first moment `dy * sum (y_l - V_self(x)) f_other(y_l)` over the
/// matching region.
pub fn region_first_moment(
    x: f64,
    t_index: usize,
    v_self: &SpaceTimeField,
    v_other: &SpaceTimeField,
    f_other: &SpaceTimeField,
) -> Result<f64> {
    region_at(x, t_index, v_self, v_other, f_other).map(|r| r.1)
}

/// Sweeps driven by fixed market data.
struct Sweeper {
    rho: f64,
    options: SolverOptions,
    a: SideData,
    b: SideData,
}

impl Sweeper {
    fn new(params: &MarketParams, grids: &Grids, options: SolverOptions) -> Result<Self> {
        params.validate()?;
        options.validate()?;
        Ok(Sweeper {
            rho: params.rho,
            options,
            a: SideData::new(params, grids, Side::A)?,
            b: SideData::new(params, grids, Side::B)?,
        })
    }

    fn data(&self, side: Side) -> &SideData {
        match side {
            Side::A => &self.a,
            Side::B => &self.b,
        }
    }

    fn value(&self, side: Side, old: &SpaceTimeField, table: &RegionTable) -> Result<SpaceTimeField> {
        let d = self.data(side);
        let time = old.time();
        let dt = time.dt();
        let n_t = time.n_steps();
        let denom = self.rho * dt + 1.0;
        let gs = self.options.sweep_mode == SweepMode::GaussSeidelInTime;
        let mut new = old.clone();
        new.slice_mut(n_t).copy_from_slice(&d.terminal);
        for k in (0..n_t).rev() {
            for i in 0..old.space().len() {
                let next = if gs { new.get(i, k + 1) } else { old.get(i, k + 1) };
                let gain = d.partner_rate * table.moment.get(i, k) + d.running[i];
                new.set(i, k, (next + gain * dt) / denom);
            }
        }
        self.blend(&mut new, old);
        new.slice_mut(n_t).copy_from_slice(&d.terminal);
        check_finite(&new, side_field(side, "V"))?;
        Ok(new)
    }

    fn density(&self, side: Side, old: &SpaceTimeField, table: &RegionTable) -> Result<SpaceTimeField> {
        let d = self.data(side);
        let time = old.time();
        let dt = time.dt();
        let gs = self.options.sweep_mode == SweepMode::GaussSeidelInTime;
        let mut new = old.clone();
        new.slice_mut(0).copy_from_slice(&d.initial);
        for k in 0..time.n_steps() {
            for i in 0..old.space().len() {
                let prev = if gs { new.get(i, k) } else { old.get(i, k) };
                let rate = (d.partner_rate * table.mass.get(i, k)).max(0.0);
                new.set(i, k + 1, prev / (dt * rate + 1.0));
            }
        }
        self.blend(&mut new, old);
        new.slice_mut(0).copy_from_slice(&d.initial);
        check_finite(&new, side_field(side, "f"))?;
        Ok(new)
    }

    fn blend(&self, new: &mut SpaceTimeField, old: &SpaceTimeField) {
        let w = self.options.damping;
        if w < 1.0 {
            for (n, o) in new.values_mut().iter_mut().zip(old.values()) {
                *n = w * *n + (1.0 - w) * *o;
            }
        }
    }

    fn tables(&self, state: &EquilibriumState) -> Result<(RegionTable, RegionTable)> {
        Ok((region_table(state, Side::A)?, region_table(state, Side::B)?))
    }

    fn step(&self, state: &EquilibriumState) -> Result<EquilibriumState> {
        let (ta, tb) = self.tables(state)?;
        Ok(EquilibriumState {
            v_a: self.value(Side::A, &state.v_a, &ta)?,
            v_b: self.value(Side::B, &state.v_b, &tb)?,
            f_a: self.density(Side::A, &state.f_a, &ta)?,
            f_b: self.density(Side::B, &state.f_b, &tb)?,
            iteration: state.iteration + 1,
            residual: state.residual,
            converged: false,
            trace: Vec::new(),
        })
    }
}

fn check_finite(field: &SpaceTimeField, name: &'static str) -> Result<()> {
    match field.find_non_finite() {
        Some((i, k)) => Err(Error::NonFinite { field: name, i, k }),
        None => Ok(()),
    }
}

/// One value update from iterate `state`; returns the new `(V_A, V_B)`.
pub fn value_sweep(
    state: &EquilibriumState,
    params: &MarketParams,
    options: &SolverOptions,
) -> Result<(SpaceTimeField, SpaceTimeField)> {
    let sweeper = Sweeper::new(params, &state.grids(), *options)?;
    let (ta, tb) = sweeper.tables(state)?;
    Ok((
        sweeper.value(Side::A, &state.v_a, &ta)?,
        sweeper.value(Side::B, &state.v_b, &tb)?,
    ))
}

/// One density update from iterate `state`; returns the new `(f_A, f_B)`.
pub fn density_sweep(
    state: &EquilibriumState,
    params: &MarketParams,
    options: &SolverOptions,
) -> Result<(SpaceTimeField, SpaceTimeField)> {
    let sweeper = Sweeper::new(params, &state.grids(), *options)?;
    let (ta, tb) = sweeper.tables(state)?;
    Ok((
        sweeper.density(Side::A, &state.f_a, &ta)?,
        sweeper.density(Side::B, &state.f_b, &tb)?,
    ))
}

/// Relative increment norm of one field. The double Riemann sum runs over
/// quality nodes `1..=N` and over the time levels a sweep updates: all but
/// the terminal level for values, all but the initial level for densities.
fn field_error(prev: &SpaceTimeField, next: &SpaceTimeField, levels: std::ops::Range<usize>, floor: f64) -> f64 {
    let n = prev.space().len();
    let cell = prev.space().dx() * prev.time().dt();
    let rows: Vec<f64> = levels
        .map(|k| {
            let (p, q) = (prev.slice(k), next.slice(k));
            (1..n)
                .map(|i| {
                    let r = (q[i] - p[i]) / p[i].abs().max(floor);
                    r * r
                })
                .sum::<f64>()
        })
        .collect();
    (rows.iter().sum::<f64>() * cell).sqrt()
}

/// The four-term relative error between successive iterates.
pub fn relative_error(
    prev: &EquilibriumState,
    next: &EquilibriumState,
    options: &SolverOptions,
) -> Result<ResidualTerms> {
    if !(prev.v_a.same_shape(&next.v_a)
        && prev.v_b.same_shape(&next.v_b)
        && prev.f_a.same_shape(&next.f_a)
        && prev.f_b.same_shape(&next.f_b))
    {
        return Err(Error::InvalidArgument("states have different grids".into()));
    }
    let n_t = prev.v_a.time().n_steps();
    let eps = options.denominator_floor;
    Ok(ResidualTerms {
        e_va: field_error(&prev.v_a, &next.v_a, 0..n_t, eps),
        e_vb: field_error(&prev.v_b, &next.v_b, 0..n_t, eps),
        e_fa: field_error(&prev.f_a, &next.f_a, 1..n_t + 1, eps),
        e_fb: field_error(&prev.f_b, &next.f_b, 1..n_t + 1, eps),
    })
}

/// Iterate the coupled sweeps from the initial iterate until the relative
/// error drops below `options.tol` or `options.max_iters` is reached.
pub fn solve_fixed_point(params: &MarketParams, grids: &Grids, options: &SolverOptions) -> Result<EquilibriumState> {
    solve_fixed_point_with(params, grids, options, |_, _| {})
}

/// As [`solve_fixed_point`], calling `observe(iteration, terms)` after every
/// iteration.
pub fn solve_fixed_point_with(
    params: &MarketParams,
    grids: &Grids,
    options: &SolverOptions,
    mut observe: impl FnMut(usize, &ResidualTerms),
) -> Result<EquilibriumState> {
    let sweeper = Sweeper::new(params, grids, *options)?;
    let mut state = EquilibriumState::initial(params, grids)?;
    let mut trace = Vec::new();
    while state.iteration < options.max_iters {
        let mut next = sweeper.step(&state)?;
        let terms = relative_error(&state, &next, options)?;
        observe(next.iteration, &terms);
        trace.push(terms);
        next.residual = terms.total();
        next.converged = next.residual < options.tol;
        state = next;
        if state.converged {
            break;
        }
    }
    state.trace = trace;
    Ok(state)
}

/// Outcome of inverting a nondecreasing value slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdInverse {
    /// The query lies below the slice minimum: no quality accepts it.
    Empty,
    Interior(f64),
    /// The query exceeds the slice maximum; the inverse is truncated at the
    /// domain edge.
    Clamped(f64),
}

impl ThresholdInverse {
    pub fn value(&self) -> Option<f64> {
        match self {
            ThresholdInverse::Empty => None,
            ThresholdInverse::Interior(y) | ThresholdInverse::Clamped(y) => Some(*y),
        }
    }
}

/// Piecewise-linear generalized inverse `sup { y : V(y, t_k) <= x }`.
pub fn threshold_inverse(v: &SpaceTimeField, x: f64, t_index: usize) -> Result<ThresholdInverse> {
    if t_index >= v.time().len() {
        return Err(Error::InvalidArgument(format!("time index {t_index} out of range")));
    }
    let slice = v.slice(t_index);
    check_monotone(slice, "V", t_index)?;
    Ok(invert_slice(v.space(), slice, x))
}

pub(crate) fn invert_slice(grid: &SpatialGrid, slice: &[f64], x: f64) -> ThresholdInverse {
    let n = slice.len() - 1;
    if x < slice[0] {
        return ThresholdInverse::Empty;
    }
    if x > slice[n] {
        return ThresholdInverse::Clamped(grid.x_max());
    }
    let j = slice.partition_point(|v| *v <= x) - 1;
    if j == n {
        return ThresholdInverse::Interior(grid.x_max());
    }
    let (lo, hi) = (slice[j], slice[j + 1]);
    let w = if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
    let y = grid.node(j) + w * (grid.node(j + 1) - grid.node(j));
    ThresholdInverse::Interior(y)
}

/// Mass of the initial density beyond the domain edge, which the truncated
/// grid discards.
pub fn truncated_mass(params: &MarketParams, side: Side, x_max: f64) -> f64 {
    1.0 - params.side(side).initial_density.cdf(x_max)
}
