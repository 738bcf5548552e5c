//! Market description: the two sides, their utilities and initial quality
//! densities, and the grids the equilibrium is computed on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{SpatialGrid, TimeGrid};
use crate::income::{GeneralizedParetoParams, InitialDensity, ParetoLogNormalParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Side::A => "A",
            Side::B => "B",
        }
    }
}

/// A nonnegative utility of quality. Running utilities are time-independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Utility {
    /// `slope * z`.
    Linear { slope: f64 },
    /// Piecewise-linear through `(z, value)` points; extended linearly past
    /// the last point with the last segment's slope.
    Tabulated { z: Vec<f64>, value: Vec<f64> },
}

impl Utility {
    pub fn linear(slope: f64) -> Self {
        Utility::Linear { slope }
    }

    pub fn eval(&self, z: f64) -> f64 {
        match self {
            Utility::Linear { slope } => slope * z,
            Utility::Tabulated { z: zs, value } => {
                let n = zs.len();
                let j = zs.partition_point(|v| *v <= z).clamp(1, n - 1);
                let w = (z - zs[j - 1]) / (zs[j] - zs[j - 1]);
                value[j - 1] + w * (value[j] - value[j - 1])
            }
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        match self {
            Utility::Linear { slope } => {
                if !(slope.is_finite() && *slope >= 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "{what}: slope must be finite and >= 0, got {slope}"
                    )));
                }
            }
            Utility::Tabulated { z, value } => {
                if z.len() < 2 || z.len() != value.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{what}: tabulated utility needs >= 2 matching points"
                    )));
                }
                if z[0] != 0.0 || z.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::InvalidArgument(format!(
                        "{what}: tabulated z must start at 0 and increase strictly"
                    )));
                }
                if value.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::InvalidArgument(format!(
                        "{what}: tabulated values must be finite and >= 0"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Minimum and maximum difference quotients over the grid: the lower and
    /// upper Lipschitz envelopes. For a linear utility both equal the slope.
    pub fn slope_bounds(&self, grid: &SpatialGrid) -> (f64, f64) {
        match self {
            Utility::Linear { slope } => (*slope, *slope),
            Utility::Tabulated { .. } => {
                let vals: Vec<f64> = grid.nodes().iter().map(|z| self.eval(*z)).collect();
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for w in vals.windows(2) {
                    let s = (w[1] - w[0]) / grid.dx();
                    lo = lo.min(s);
                    hi = hi.max(s);
                }
                (lo, hi)
            }
        }
    }

    pub fn profile(&self, grid: &SpatialGrid) -> Vec<f64> {
        grid.nodes().iter().map(|z| self.eval(*z)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSideParams {
    /// Poisson meeting intensity of this side, per year.
    pub intensity: f64,
    pub running: Utility,
    pub terminal: Utility,
    pub initial_density: InitialDensity,
}

impl MarketSideParams {
    pub fn validate(&self, side: Side) -> Result<()> {
        if !(self.intensity.is_finite() && self.intensity >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "side {}: intensity must be >= 0, got {}",
                side.label(),
                self.intensity
            )));
        }
        self.running.validate("running utility")?;
        self.terminal.validate("terminal utility")?;
        self.initial_density.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    pub side_a: MarketSideParams,
    pub side_b: MarketSideParams,
    /// Discount rate per year.
    pub rho: f64,
    /// Horizon in years.
    pub horizon: f64,
}

impl MarketParams {
    pub fn side(&self, side: Side) -> &MarketSideParams {
        match side {
            Side::A => &self.side_a,
            Side::B => &self.side_b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::InvalidArgument(format!("rho must be > 0, got {}", self.rho)));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be > 0, got {}",
                self.horizon
            )));
        }
        self.side_a.validate(Side::A)?;
        self.side_b.validate(Side::B)
    }

    /// The labor-market configuration: job seekers (A) with a Pareto
    /// log-normal quality density, firms (B) with a generalized Pareto one.
    pub fn labor_market() -> Self {
        MarketParams {
            side_a: MarketSideParams {
                intensity: 20.0,
                running: Utility::linear(0.013),
                terminal: Utility::linear(0.6),
                initial_density: InitialDensity::ParetoLognormal(ParetoLogNormalParams {
                    alpha: 1.8644,
                    nu: 6.5492,
                    tau: 0.44209,
                }),
            },
            side_b: MarketSideParams {
                intensity: 26.0,
                running: Utility::linear(0.05),
                terminal: Utility::linear(1.1),
                initial_density: InitialDensity::GeneralizedPareto(GeneralizedParetoParams {
                    beta: 8.6348,
                    mu: 459.4388,
                    sigma: 835.2216,
                }),
            },
            rho: 0.04,
            horizon: 1.0,
        }
    }
}

/// Quality grids for both sides plus the shared time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grids {
    pub a: SpatialGrid,
    pub b: SpatialGrid,
    pub time: TimeGrid,
}

impl Grids {
    pub fn new(x_max: f64, n_a: usize, n_b: usize, horizon: f64, n_t: usize) -> Result<Self> {
        Ok(Grids {
            a: SpatialGrid::new(x_max, n_a)?,
            b: SpatialGrid::new(x_max, n_b)?,
            time: TimeGrid::new(horizon, n_t)?,
        })
    }

    pub fn side(&self, side: Side) -> &SpatialGrid {
        match side {
            Side::A => &self.a,
            Side::B => &self.b,
        }
    }
}
