//! Initial quality distributions: the right-tailed Pareto log-normal and the
//! generalized Pareto families, plus quantile calibration by RRMSE.

use std::f64::consts::SQRT_2;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};

/// Upper limit for quantile bracketing before parameters are declared
/// pathological.
pub const BRACKET_LIMIT: f64 = 1e12;

/// Standard normal CDF via the complementary error function
/// (`libm::erfc`, max error about 1 ulp), so the absolute error is far
/// below 1e-12 everywhere.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

fn ln_normal_cdf(z: f64) -> f64 {
    normal_cdf(z).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoLogNormalParams {
    pub alpha: f64,
    pub nu: f64,
    pub tau: f64,
}

impl ParetoLogNormalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.tau > 0.0 && self.nu.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "Pareto log-normal needs alpha > 0, tau > 0, finite nu: {self:?}"
            )));
        }
        Ok(())
    }

    /// `alpha*nu + alpha^2 tau^2 / 2`, the log of the tail scale.
    fn log_scale(&self) -> f64 {
        self.alpha * self.nu + 0.5 * self.alpha * self.alpha * self.tau * self.tau
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedParetoParams {
    pub beta: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl GeneralizedParetoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.sigma > 0.0 && self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "generalized Pareto needs beta > 0, sigma > 0, mu >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn plognorm_pdf(p: &ParetoLogNormalParams, x: f64) -> f64 {
    if !(x > 0.0) {
        return 0.0;
    }
    let lx = x.ln();
    let b = (lx - p.nu - p.alpha * p.tau * p.tau) / p.tau;
    let log_pdf = p.alpha.ln() - (p.alpha + 1.0) * lx + p.log_scale() + ln_normal_cdf(b);
    log_pdf.exp()
}

/// `Phi((ln x - nu)/tau) - x^-alpha e^{alpha nu + alpha^2 tau^2/2} Phi((ln x - nu - alpha tau^2)/tau)`.
pub fn plognorm_cdf(p: &ParetoLogNormalParams, x: f64) -> f64 {
    if !(x > 0.0) {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    let lx = x.ln();
    let a = (lx - p.nu) / p.tau;
    let b = a - p.alpha * p.tau;
    let tail = (-p.alpha * lx + p.log_scale() + ln_normal_cdf(b)).exp();
    (normal_cdf(a) - tail).clamp(0.0, 1.0)
}

/// Inverse of [`plognorm_cdf`] by bracketed bisection.
pub fn plognorm_quantile(p: &ParetoLogNormalParams, prob: f64) -> Result<f64> {
    check_prob(prob)?;
    invert_cdf(|x| plognorm_cdf(p, x), prob, p.nu.exp().max(1e-6))
}

fn check_prob(prob: f64) -> Result<()> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "probability must lie in (0, 1), got {prob}"
        )));
    }
    Ok(())
}

fn invert_cdf(cdf: impl Fn(f64) -> f64, target: f64, start: f64) -> Result<f64> {
    let mut hi = start;
    while cdf(hi) < target {
        hi *= 2.0;
        if hi > BRACKET_LIMIT {
            return Err(Error::Bracketing {
                prob: target,
                limit: BRACKET_LIMIT,
            });
        }
    }
    let mut lo = 0.0;
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn gpareto_pdf(p: &GeneralizedParetoParams, y: f64) -> f64 {
    if !(y > p.mu) {
        return 0.0;
    }
    let z = 1.0 + (y - p.mu) / (p.beta * p.sigma);
    z.powf(-p.beta - 1.0) / p.sigma
}

pub fn gpareto_cdf(p: &GeneralizedParetoParams, y: f64) -> f64 {
    if !(y > p.mu) {
        return 0.0;
    }
    let z = 1.0 + (y - p.mu) / (p.beta * p.sigma);
    1.0 - z.powf(-p.beta)
}

/// Closed form `mu + beta sigma ((1 - prob)^(-1/beta) - 1)`.
pub fn gpareto_quantile(p: &GeneralizedParetoParams, prob: f64) -> Result<f64> {
    check_prob(prob)?;
    Ok(gpareto_unchecked_quantile(p, prob))
}

fn gpareto_unchecked_quantile(p: &GeneralizedParetoParams, prob: f64) -> f64 {
    p.mu + p.beta * p.sigma * ((-(-prob).ln_1p() / p.beta).exp_m1())
}

/// Initial quality density of one market side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum InitialDensity {
    ParetoLognormal(ParetoLogNormalParams),
    GeneralizedPareto(GeneralizedParetoParams),
    /// Piecewise-linear density through `(x, f)` points, zero outside.
    Tabulated {
        x: Vec<f64>,
        f: Vec<f64>,
    },
}

impl InitialDensity {
    pub fn validate(&self) -> Result<()> {
        match self {
            InitialDensity::ParetoLognormal(p) => p.validate(),
            InitialDensity::GeneralizedPareto(p) => p.validate(),
            InitialDensity::Tabulated { x, f } => {
                if x.len() < 2 || x.len() != f.len() {
                    return Err(Error::InvalidArgument(
                        "tabulated density needs >= 2 matching (x, f) points".into(),
                    ));
                }
                if x.windows(2).any(|w| w[1] <= w[0]) || x[0] < 0.0 {
                    return Err(Error::InvalidArgument(
                        "tabulated x must be nonnegative and strictly increasing".into(),
                    ));
                }
                if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::InvalidArgument(
                        "tabulated density values must be finite and >= 0".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            InitialDensity::ParetoLognormal(_) => "pareto_lognormal",
            InitialDensity::GeneralizedPareto(_) => "generalized_pareto",
            InitialDensity::Tabulated { .. } => "tabulated",
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self {
            InitialDensity::ParetoLognormal(p) => plognorm_pdf(p, x),
            InitialDensity::GeneralizedPareto(p) => gpareto_pdf(p, x),
            InitialDensity::Tabulated { x: xs, f } => {
                if x < xs[0] || x > xs[xs.len() - 1] {
                    return 0.0;
                }
                let j = xs.partition_point(|v| *v <= x).clamp(1, xs.len() - 1);
                let w = (x - xs[j - 1]) / (xs[j] - xs[j - 1]);
                f[j - 1] + w * (f[j] - f[j - 1])
            }
        }
    }

    /// Cumulative mass on `[0, x]`. For tabulated densities this is the exact
    /// integral of the piecewise-linear profile, normalized to total mass 1.
    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            InitialDensity::ParetoLognormal(p) => plognorm_cdf(p, x),
            InitialDensity::GeneralizedPareto(p) => gpareto_cdf(p, x),
            InitialDensity::Tabulated { x: xs, f } => {
                let total = tabulated_mass(xs, f, f64::INFINITY);
                if total <= 0.0 {
                    return 0.0;
                }
                (tabulated_mass(xs, f, x) / total).clamp(0.0, 1.0)
            }
        }
    }

    pub fn quantile(&self, prob: f64) -> Result<f64> {
        match self {
            InitialDensity::ParetoLognormal(p) => plognorm_quantile(p, prob),
            InitialDensity::GeneralizedPareto(p) => gpareto_quantile(p, prob),
            InitialDensity::Tabulated { x, .. } => {
                check_prob(prob)?;
                let (mut lo, mut hi) = (x[0], x[x.len() - 1]);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.cdf(mid) < prob {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Ok(0.5 * (lo + hi))
            }
        }
    }

    /// Quantile of the distribution conditioned on `[0, domain_max]`.
    pub fn truncated_quantile(&self, prob: f64, domain_max: f64) -> Result<f64> {
        check_prob(prob)?;
        let inside = self.cdf(domain_max);
        if !(inside > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "no probability mass on [0, {domain_max}]"
            )));
        }
        let target = prob * inside;
        match self {
            InitialDensity::GeneralizedPareto(p) => Ok(gpareto_unchecked_quantile(p, target)),
            _ => self.quantile(target),
        }
    }
}

fn tabulated_mass(xs: &[f64], f: &[f64], upto: f64) -> f64 {
    let mut mass = 0.0;
    for j in 1..xs.len() {
        let (a, b) = (xs[j - 1], xs[j]);
        if upto <= a {
            break;
        }
        let end = upto.min(b);
        let slope = (f[j] - f[j - 1]) / (b - a);
        let fe = f[j - 1] + slope * (end - a);
        mass += 0.5 * (f[j - 1] + fe) * (end - a);
    }
    mass
}

/// Empirical quantile table: strictly increasing probabilities with their
/// quantile values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileData {
    points: Vec<(f64, f64)>,
}

impl QuantileData {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("quantile data is empty".into()));
        }
        for &(p, q) in &points {
            if !(p > 0.0 && p < 1.0) || !(q > 0.0 && q.is_finite()) {
                return Err(Error::InvalidArgument(format!("bad quantile point ({p}, {q})")));
            }
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidArgument(
                    "quantile probabilities must be strictly increasing".into(),
                ));
            }
            if w[1].1 < w[0].1 {
                return Err(Error::InvalidArgument("quantile values must be nondecreasing".into()));
            }
        }
        Ok(QuantileData { points })
    }

    /// The earnings table used for the labor-market calibration
    /// (present value of 30 years of earnings, thousands of USD).
    pub fn earnings_table() -> Self {
        QuantileData {
            points: vec![
                (0.10, 551.43),
                (0.25, 717.67),
                (0.50, 1058.34),
                (0.75, 1687.90),
                (0.90, 2627.23),
            ],
        }
    }

    /// Parse `prob,value` rows; a non-numeric first row is taken as a header
    /// and `#` lines are comments.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cells = line.split(',').map(str::trim);
            let (a, b) = match (cells.next(), cells.next()) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::InvalidArgument(format!("line {}: expected `prob,value`", n + 1))),
            };
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(p), Ok(q)) => points.push((p, q)),
                _ if points.is_empty() && n == 0 => continue,
                _ => return Err(Error::InvalidArgument(format!("line {}: not numeric: {line}", n + 1))),
            }
        }
        QuantileData::new(points)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn probs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.0).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Data value at the probability closest to `prob`.
    fn nearest(&self, prob: f64) -> f64 {
        self.points
            .iter()
            .min_by(|a, b| (a.0 - prob).abs().total_cmp(&(b.0 - prob).abs()))
            .map(|p| p.1)
            .unwrap_or(f64::NAN)
    }
}

/// `sqrt( mean((model - data)^2) / sum(model^2) )`.
pub fn rrmse(model: &[f64], data: &[f64]) -> Result<f64> {
    if model.is_empty() || model.len() != data.len() {
        return Err(Error::InvalidArgument(format!(
            "rrmse needs equal nonempty lengths, got {} and {}",
            model.len(),
            data.len()
        )));
    }
    let denom: f64 = model.iter().map(|m| m * m).sum();
    if denom == 0.0 {
        return Err(Error::InvalidArgument(
            "rrmse undefined for an all-zero model vector".into(),
        ));
    }
    let mse = model.iter().zip(data).map(|(m, d)| (m - d) * (m - d)).sum::<f64>() / model.len() as f64;
    Ok((mse / denom).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ParetoLognormal,
    GeneralizedPareto,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::ParetoLognormal => f.write_str("pareto_lognormal"),
            Family::GeneralizedPareto => f.write_str("generalized_pareto"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CalibrationOptions {
    pub max_iters: usize,
    pub xtol: f64,
    /// When set, model quantiles are those of the distribution conditioned
    /// on `[0, domain_max]`, the quality domain the solver works on.
    pub domain_max: Option<f64>,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            max_iters: 5000,
            xtol: 1e-8,
            domain_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    #[serde(flatten)]
    pub density: InitialDensity,
    pub rrmse: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Model quantiles at the data probabilities.
pub fn model_quantiles(density: &InitialDensity, probs: &[f64], domain_max: Option<f64>) -> Result<Vec<f64>> {
    probs
        .iter()
        .map(|&p| match domain_max {
            Some(m) => density.truncated_quantile(p, m),
            None => density.quantile(p),
        })
        .collect()
}

/// RRMSE of `density` against `data`.
pub fn density_rrmse(density: &InitialDensity, data: &QuantileData, domain_max: Option<f64>) -> Result<f64> {
    let model = model_quantiles(density, &data.probs(), domain_max)?;
    rrmse(&model, &data.values())
}

/// Starting point used when the caller has none.
pub fn default_init(family: Family, data: &QuantileData) -> InitialDensity {
    match family {
        Family::ParetoLognormal => {
            let logs: Vec<f64> = data.values().iter().map(|q| q.ln()).collect();
            let n = logs.len() as f64;
            let mean = logs.iter().sum::<f64>() / n;
            let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
            InitialDensity::ParetoLognormal(ParetoLogNormalParams {
                alpha: 2.0,
                nu: mean,
                tau: var.sqrt().max(1e-3),
            })
        }
        Family::GeneralizedPareto => {
            let q10 = data.nearest(0.10);
            let q50 = data.nearest(0.50);
            InitialDensity::GeneralizedPareto(GeneralizedParetoParams {
                beta: 5.0,
                mu: 0.8 * q10,
                sigma: (q50 - q10).max(1e-3 * q50),
            })
        }
    }
}

fn encode(density: &InitialDensity) -> Vec<f64> {
    match density {
        InitialDensity::ParetoLognormal(p) => vec![p.alpha.ln(), p.nu, p.tau.ln()],
        InitialDensity::GeneralizedPareto(p) => vec![p.beta.ln(), p.mu.ln(), p.sigma.ln()],
        InitialDensity::Tabulated { .. } => unreachable!("tabulated densities are not fitted"),
    }
}

fn decode(family: Family, z: &[f64]) -> InitialDensity {
    match family {
        Family::ParetoLognormal => InitialDensity::ParetoLognormal(ParetoLogNormalParams {
            alpha: z[0].exp(),
            nu: z[1],
            tau: z[2].exp(),
        }),
        Family::GeneralizedPareto => InitialDensity::GeneralizedPareto(GeneralizedParetoParams {
            beta: z[0].exp(),
            mu: z[1].exp(),
            sigma: z[2].exp(),
        }),
    }
}

/// Fit `family` to `data` by minimizing RRMSE with Nelder–Mead over the
/// log of the positive parameters (`nu` is searched directly).
pub fn calibrate(
    family: Family,
    data: &QuantileData,
    init: &InitialDensity,
    options: &CalibrationOptions,
) -> Result<CalibrationResult> {
    if data.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "calibration needs at least 3 quantile points, got {}",
            data.len()
        )));
    }
    let matches = matches!(
        (family, init),
        (Family::ParetoLognormal, InitialDensity::ParetoLognormal(_))
            | (Family::GeneralizedPareto, InitialDensity::GeneralizedPareto(_))
    );
    if !matches {
        return Err(Error::InvalidArgument(format!(
            "initial parameters are not of family {family}"
        )));
    }
    init.validate()?;
    if let InitialDensity::GeneralizedPareto(p) = init {
        if p.mu <= 0.0 {
            return Err(Error::InvalidArgument(
                "initial mu must be strictly positive for the log search".into(),
            ));
        }
    }
    let start_rrmse = density_rrmse(init, data, options.domain_max)?;

    let objective = |z: &[f64]| -> f64 {
        let d = decode(family, z);
        if d.validate().is_err() {
            return f64::INFINITY;
        }
        density_rrmse(&d, data, options.domain_max).unwrap_or(f64::INFINITY)
    };
    let nm = nelder_mead(
        objective,
        &encode(init),
        &NelderMeadOptions {
            max_iters: options.max_iters,
            xtol: options.xtol,
            ..Default::default()
        },
    );
    let (density, rrmse) = if nm.fx <= start_rrmse {
        (decode(family, &nm.x), nm.fx)
    } else {
        (init.clone(), start_rrmse)
    };
    Ok(CalibrationResult {
        density,
        rrmse,
        iterations: nm.iterations,
        converged: nm.converged,
    })
}

/// Continuous-time annuity factor `(1 - e^{-years * rate}) / rate`.
pub fn annuity_factor(rate: f64, years: f64) -> f64 {
    -(-rate * years).exp_m1() / rate
}

/// Hourly wage implied by a present value in thousands of dollars, assuming
/// 52 weeks of 40 hours per year.
pub fn hourly_wage(present_value_thousands: f64, annuity: f64) -> f64 {
    present_value_thousands * 1000.0 / (annuity * 52.0 * 40.0)
}
