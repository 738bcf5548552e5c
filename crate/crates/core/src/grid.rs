//! Uniform quality and time grids, the fields that live on them, and the
//! right-endpoint quadrature used throughout the solver.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform partition of `[0, x_max]` into `n_cells` intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    x_max: f64,
    n_cells: usize,
    dx: f64,
    nodes: Vec<f64>,
}

impl SpatialGrid {
    pub fn new(x_max: f64, n_cells: usize) -> Result<Self> {
        if !(x_max.is_finite() && x_max > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "x_max must be positive and finite, got {x_max}"
            )));
        }
        if n_cells < 2 {
            return Err(Error::InvalidArgument(format!(
                "n_cells must be at least 2, got {n_cells}"
            )));
        }
        let dx = x_max / n_cells as f64;
        let nodes = uniform_nodes(x_max, n_cells, dx);
        Ok(SpatialGrid {
            x_max,
            n_cells,
            dx,
            nodes,
        })
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn len(&self) -> usize {
        self.n_cells + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    /// Index of the node equal to `x`, if `x` sits exactly on the grid.
    pub fn exact_index(&self, x: f64) -> Option<usize> {
        let guess = (x / self.dx).round();
        if guess < 0.0 || guess > self.n_cells as f64 {
            return None;
        }
        let i = guess as usize;
        (self.nodes[i] == x).then_some(i)
    }
}

/// Build the spatial grid for `[0, x_max]` with `n_cells` uniform cells.
pub fn build_grid(x_max: f64, n_cells: usize) -> Result<SpatialGrid> {
    SpatialGrid::new(x_max, n_cells)
}

/// Uniform partition of `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
    dt: f64,
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if n_steps < 1 {
            return Err(Error::InvalidArgument("n_steps must be positive".into()));
        }
        let dt = horizon / n_steps as f64;
        let nodes = uniform_nodes(horizon, n_steps, dt);
        Ok(TimeGrid {
            horizon,
            n_steps,
            dt,
            nodes,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    /// Largest index `k` with `t_k <= t` (clamped into the grid).
    pub fn left_index(&self, t: f64) -> usize {
        if t <= 0.0 {
            return 0;
        }
        let mut k = ((t / self.dt).floor() as usize).min(self.n_steps);
        // floor can land one off when t sits on a node
        while k > 0 && self.nodes[k] > t {
            k -= 1;
        }
        while k < self.n_steps && self.nodes[k + 1] <= t {
            k += 1;
        }
        k
    }
}

fn uniform_nodes(end: f64, n: usize, step: f64) -> Vec<f64> {
    let mut nodes: Vec<f64> = (0..=n).map(|i| i as f64 * step).collect();
    nodes[0] = 0.0;
    nodes[n] = end;
    nodes
}

/// A real-valued function sampled on (quality x time) nodes.
///
/// Each time level is stored contiguously, so `slice(k)` is the full
/// quality profile at `t_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    space: SpatialGrid,
    time: TimeGrid,
    values: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(space: &SpatialGrid, time: &TimeGrid) -> Self {
        SpaceTimeField {
            space: space.clone(),
            time: time.clone(),
            values: vec![0.0; space.len() * time.len()],
        }
    }

    /// Field whose every time level equals `profile`.
    pub fn from_profile(space: &SpatialGrid, time: &TimeGrid, profile: &[f64]) -> Result<Self> {
        if profile.len() != space.len() {
            return Err(Error::InvalidArgument(format!(
                "profile has {} values, grid has {} nodes",
                profile.len(),
                space.len()
            )));
        }
        let mut values = Vec::with_capacity(space.len() * time.len());
        for _ in 0..time.len() {
            values.extend_from_slice(profile);
        }
        Ok(SpaceTimeField {
            space: space.clone(),
            time: time.clone(),
            values,
        })
    }

    pub fn from_fn(space: &SpatialGrid, time: &TimeGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut field = Self::zeros(space, time);
        for k in 0..time.len() {
            let t = time.node(k);
            for (i, v) in field.slice_mut(k).iter_mut().enumerate() {
                *v = f(space.node(i), t);
            }
        }
        field
    }

    pub fn space(&self) -> &SpatialGrid {
        &self.space
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[k * self.space.len() + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, k: usize, v: f64) {
        let n = self.space.len();
        self.values[k * n + i] = v;
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.space.len();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.space.len();
        &mut self.values[k * n..(k + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn same_shape(&self, other: &SpaceTimeField) -> bool {
        self.space == other.space && self.time == other.time
    }

    /// First non-finite cell, if any.
    pub fn find_non_finite(&self) -> Option<(usize, usize)> {
        let n = self.space.len();
        self.values.iter().position(|v| !v.is_finite()).map(|p| (p % n, p / n))
    }

    /// Render in the field CSV layout: a header row carrying the time nodes,
    /// then one row per quality node.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("x\\t");
        for t in self.time.nodes() {
            let _ = write!(out, ",{}", fmt_f64(*t));
        }
        out.push('\n');
        for i in 0..self.space.len() {
            out.push_str(&fmt_f64(self.space.node(i)));
            for k in 0..self.time.len() {
                let _ = write!(out, ",{}", fmt_f64(self.get(i, k)));
            }
            out.push('\n');
        }
        out
    }

    /// Parse the layout written by [`SpaceTimeField::to_csv`]. Lines starting
    /// with `#` are skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty field csv".into()))?;
        let times: Vec<f64> = header.split(',').skip(1).map(parse_f64).collect::<Result<_>>()?;
        let mut xs = Vec::new();
        let mut rows = Vec::new();
        for line in lines {
            let mut cells = line.split(',');
            let x = parse_f64(cells.next().unwrap_or(""))?;
            let row: Vec<f64> = cells.map(parse_f64).collect::<Result<_>>()?;
            if row.len() != times.len() {
                return Err(Error::InvalidArgument(format!(
                    "row at x={x} has {} values, expected {}",
                    row.len(),
                    times.len()
                )));
            }
            xs.push(x);
            rows.push(row);
        }
        if xs.len() < 3 || times.len() < 2 {
            return Err(Error::InvalidArgument("field csv too small".into()));
        }
        let space = SpatialGrid::new(*xs.last().unwrap(), xs.len() - 1)?;
        let time = TimeGrid::new(*times.last().unwrap(), times.len() - 1)?;
        let mut field = SpaceTimeField::zeros(&space, &time);
        for (i, row) in rows.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                field.set(i, k, *v);
            }
        }
        Ok(field)
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::InvalidArgument(format!("bad number {s:?}: {e}")))
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Piecewise-linear interpolation in quality at the fixed time index `k`.
pub fn interpolate_time_slice(field: &SpaceTimeField, x: f64, t_index: usize) -> Result<f64> {
    if t_index >= field.time().len() {
        return Err(Error::InvalidArgument(format!("time index {t_index} out of range")));
    }
    interpolate_profile(field.space(), field.slice(t_index), x)
}

/// Piecewise-linear interpolation of a nodal profile on `grid`.
pub fn interpolate_profile(grid: &SpatialGrid, profile: &[f64], x: f64) -> Result<f64> {
    let x_max = grid.x_max();
    if !(0.0..=x_max).contains(&x) {
        return Err(Error::OutOfDomain {
            value: x,
            lo: 0.0,
            hi: x_max,
        });
    }
    if let Some(i) = grid.exact_index(x) {
        return Ok(profile[i]);
    }
    let n = grid.n_cells();
    let mut i = ((x / grid.dx()).floor() as usize).min(n - 1);
    if grid.node(i) > x {
        i -= 1;
    } else if grid.node(i + 1) < x {
        i += 1;
    }
    let w = (x - grid.node(i)) / grid.dx();
    Ok(profile[i] + w * (profile[i + 1] - profile[i]))
}

/// `dx * sum(values[1..])`: the right-endpoint rule over nodes `1..=N`.
/// `values` holds all `N+1` nodal values; node 0 is excluded.
pub fn riemann_sum_right(values: &[f64], dx: f64) -> f64 {
    let sum: f64 = values.iter().skip(1).sum();
    dx * sum
}

/// Composite trapezoid over all nodes. Diagnostics only.
pub fn trapezoid(values: &[f64], dx: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => {
            let inner: f64 = values[1..n - 1].iter().sum();
            dx * (inner + 0.5 * (values[0] + values[n - 1]))
        }
    }
}
