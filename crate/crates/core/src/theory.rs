//! Structural constants of the coupled system, the sufficient conditions for
//! no-match, nonempty regions and uniqueness, and an audit of a computed
//! equilibrium against the bounds the exact solution satisfies.

use serde::Serialize;

use crate::grid::{riemann_sum_right, SpaceTimeField, TimeGrid};
use crate::market::{Grids, MarketParams, Side};
use crate::solver::EquilibriumState;

/// Default tail exponent of the initial-density envelope.
pub const DEFAULT_NU: f64 = 0.5;

/// Smallest admissible envelope constant; the envelope must exceed one.
const ENVELOPE_FLOOR: f64 = 1.0 + 1e-9;

/// Smallest `C` with `f0(z) <= C / (1 + z^(2+nu))` at every node, floored at
/// `1 + 1e-9`.
pub fn envelope_constant(nodes: &[f64], f0: &[f64], nu: f64) -> f64 {
    nodes
        .iter()
        .zip(f0)
        .map(|(z, f)| (1.0 + z.powf(2.0 + nu)) * f)
        .fold(ENVELOPE_FLOOR, f64::max)
}

/// Utility bounds, envelope and intensity of one side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SideInputs {
    pub lambda: f64,
    /// Running-utility lower / upper Lipschitz bounds.
    pub gamma: f64,
    pub gamma_upper: f64,
    /// Terminal-utility lower / upper Lipschitz bounds.
    pub l: f64,
    pub l_upper: f64,
    pub envelope: f64,
}

impl SideInputs {
    pub fn from_params(params: &MarketParams, grids: &Grids, side: Side, nu: f64) -> Self {
        let p = params.side(side);
        let grid = grids.side(side);
        let (gamma, gamma_upper) = p.running.slope_bounds(grid);
        let (l, l_upper) = p.terminal.slope_bounds(grid);
        let f0: Vec<f64> = grid.nodes().iter().map(|z| p.initial_density.pdf(*z)).collect();
        SideInputs {
            lambda: p.intensity,
            gamma,
            gamma_upper,
            l,
            l_upper,
            envelope: envelope_constant(grid.nodes(), &f0, nu),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SideConstants {
    pub inputs: SideInputs,
    /// Lower slope bound of the value function.
    pub k: f64,
    /// Upper slope bound of the value function.
    pub k_upper: f64,
    /// Linear-growth bound of the value function.
    pub pi: f64,
    pub m: f64,
    /// Weighted-mass bound `2^(1+nu) C / nu` of the density.
    pub mass_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoryConstants {
    pub rho: f64,
    pub horizon: f64,
    pub nu: f64,
    pub a: SideConstants,
    pub b: SideConstants,
    pub m2: f64,
    pub m3: f64,
    pub c_a: f64,
    pub c_b: f64,
    pub delta_1: f64,
    pub delta_2: f64,
}

impl TheoryConstants {
    pub fn side(&self, side: Side) -> &SideConstants {
        match side {
            Side::A => &self.a,
            Side::B => &self.b,
        }
    }
}

/// Pure arithmetic from the side inputs.
pub fn compute_constants(rho: f64, horizon: f64, nu: f64, a: SideInputs, b: SideInputs) -> TheoryConstants {
    let tail = 2f64.powf(1.0 + nu) / nu;
    let k_a = (a.gamma / (rho + b.lambda)).min(a.l);
    let k_b = (b.gamma / (rho + a.lambda)).min(b.l);
    let upper = |own: &SideInputs, other: &SideInputs, k_other: f64| {
        (other.lambda * other.envelope / (rho * k_other) + own.gamma_upper / rho).max(own.l_upper)
    };
    let pi = |own: &SideInputs, other: &SideInputs| {
        (other.lambda / rho * (tail * other.envelope + own.gamma_upper)).max(own.l_upper)
    };
    let m = |c: f64, k: f64| 2f64.max((1.0 + c) * (1.0 + k) / (k * k));
    let side = |own: SideInputs, other: &SideInputs, k: f64, k_other: f64| SideConstants {
        inputs: own,
        k,
        k_upper: upper(&own, other, k_other),
        pi: pi(&own, other),
        m: m(own.envelope, k),
        mass_bound: tail * own.envelope,
    };
    let sa = side(a, &b, k_a, k_b);
    let sb = side(b, &a, k_b, k_a);

    let c_a = b.lambda * tail * a.envelope;
    let c_b = a.lambda * tail * b.envelope;
    let m2 = (a.lambda + c_a).max(b.lambda + c_b);
    let m3 = 2f64.powf(3.0 + nu) * a.envelope * b.envelope / nu
        * ((a.lambda + b.lambda * (1.0 + k_a)) / k_a).max((b.lambda + a.lambda * (1.0 + k_b)) / k_b);

    let cross =
        2.0 * (2.0 * a.lambda * (1.0 + a.envelope) * (1.0 + k_a) * b.lambda * (1.0 + b.envelope) * (1.0 + k_b)).sqrt();
    let delta_1 = (1.0 / (4.0 * b.lambda))
        .min(1.0 / (4.0 * a.lambda))
        .min(k_a * k_b / cross);
    let delta_2 = 1f64.min(
        (nu * nu * (-(a.lambda + b.lambda)).exp()
            / (2f64.powf(3.0 + 2.0 * nu) * a.lambda * b.lambda * a.envelope * b.envelope))
            .sqrt(),
    );

    TheoryConstants {
        rho,
        horizon,
        nu,
        a: sa,
        b: sb,
        m2,
        m3,
        c_a,
        c_b,
        delta_1,
        delta_2,
    }
}

/// Constants for a market on given grids.
pub fn constants_for(params: &MarketParams, grids: &Grids, nu: f64) -> TheoryConstants {
    compute_constants(
        params.rho,
        params.horizon,
        nu,
        SideInputs::from_params(params, grids, Side::A, nu),
        SideInputs::from_params(params, grids, Side::B, nu),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoMatchPoint {
    pub t: f64,
    pub product: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoMatchReport {
    pub points: Vec<NoMatchPoint>,
    /// True iff the product exceeds one at every time node.
    pub holds: bool,
}

/// Evaluates `prod_I [e^{-rho(T-t)} l_I + (1 - e^{-rho(T-t)}) gamma_I / rho]`
/// at every time node; matching never occurs when it exceeds one throughout.
pub fn check_no_match(constants: &TheoryConstants, time: &TimeGrid) -> NoMatchReport {
    let rho = constants.rho;
    let bracket = |s: &SideInputs, t: f64| {
        let w = (-rho * (constants.horizon - t)).exp();
        w * s.l + (1.0 - w) * s.gamma / rho
    };
    let points: Vec<NoMatchPoint> = time
        .nodes()
        .iter()
        .map(|&t| {
            let product = bracket(&constants.a.inputs, t) * bracket(&constants.b.inputs, t);
            NoMatchPoint {
                t,
                product,
                holds: product > 1.0,
            }
        })
        .collect();
    let holds = points.iter().all(|p| p.holds);
    NoMatchReport { points, holds }
}

/// Sufficient condition for nonempty matching regions: `K_A K_B <= 1`.
pub fn check_nonempty(constants: &TheoryConstants) -> bool {
    constants.a.k_upper * constants.b.k_upper <= 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UniquenessReport {
    pub lambda_max: f64,
    /// `lambda_A M_A + lambda_B M_B`.
    pub growth: f64,
    pub cond_i_lhs: f64,
    pub cond_i: bool,
    pub cond_ii_lhs: f64,
    pub cond_ii_rhs: f64,
    pub cond_ii: bool,
}

pub fn check_uniqueness(constants: &TheoryConstants) -> UniquenessReport {
    let (a, b) = (&constants.a, &constants.b);
    let (rho, t) = (constants.rho, constants.horizon);
    let lambda_max = a.inputs.lambda.max(b.inputs.lambda);
    let growth = a.inputs.lambda * a.m + b.inputs.lambda * b.m;
    let horizon_factor = if growth > 0.0 {
        (growth * t).exp_m1() / growth
    } else {
        t
    };
    let cond_i_lhs =
        constants.m3 * lambda_max * (constants.m2 * t).exp() * (-(-rho * t).exp_m1() / rho) * horizon_factor;
    let cond_ii_lhs = 2.0 * (lambda_max * constants.m3).sqrt();
    let cond_ii_rhs = rho - constants.m2 - growth;
    UniquenessReport {
        lambda_max,
        growth,
        cond_i_lhs,
        cond_i: cond_i_lhs < 1.0,
        cond_ii_lhs,
        cond_ii_rhs,
        cond_ii: cond_ii_lhs < cond_ii_rhs,
    }
}

/// Slack factors for the audit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuditTolerances {
    /// Solver residual tolerance; the zero-quality anchor allows 10x this.
    pub tol: f64,
    /// Relative slack on upper slope and growth bounds.
    pub bound_slack: f64,
    /// Relative tolerance on monotonicity in quality.
    pub monotone_tol: f64,
}

impl Default for AuditTolerances {
    fn default() -> Self {
        AuditTolerances {
            tol: 1e-4,
            bound_slack: 0.05,
            monotone_tol: crate::solver::MONOTONE_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Location {
    pub side: Side,
    pub i: usize,
    pub k: usize,
    pub x: f64,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditCheck {
    pub check_name: String,
    pub pass: bool,
    pub worst_value: f64,
    pub worst_location: Option<Location>,
    /// The bound the worst value is compared against.
    pub limit: f64,
}

fn locate(field: &SpaceTimeField, side: Side, i: usize, k: usize) -> Location {
    Location {
        side,
        i,
        k,
        x: field.space().node(i),
        t: field.time().node(k),
    }
}

/// Tracks the largest value seen and where.
#[derive(Clone, Copy)]
struct Worst {
    value: f64,
    at: Option<(usize, usize)>,
}

impl Worst {
    fn new() -> Self {
        Worst {
            value: f64::NEG_INFINITY,
            at: None,
        }
    }

    fn see(&mut self, v: f64, i: usize, k: usize) {
        if v > self.value || self.at.is_none() {
            self.value = v;
            self.at = Some((i, k));
        }
    }

    fn check(self, name: String, field: &SpaceTimeField, side: Side, limit: f64, pass: bool) -> AuditCheck {
        AuditCheck {
            check_name: name,
            pass,
            worst_value: self.value,
            worst_location: self.at.map(|(i, k)| locate(field, side, i, k)),
            limit,
        }
    }
}

/// Checks a computed equilibrium against monotonicity, slope, anchor,
/// growth, density and mass bounds for both sides.
pub fn audit_solution(state: &EquilibriumState, constants: &TheoryConstants, tol: &AuditTolerances) -> Vec<AuditCheck> {
    let mut out = Vec::new();
    for side in [Side::A, Side::B] {
        let v = state.value(side);
        let f = state.density(side);
        let c = constants.side(side);
        let name = |s: &str| format!("{s}[{}]", side.label());
        let (nx, nt) = (v.space().len(), v.time().len());
        let dx = v.space().dx();
        let scale = v.values().iter().fold(1.0f64, |m, x| m.max(x.abs()));

        let mut drop = Worst::new();
        let mut slope = Worst::new();
        let mut anchor = Worst::new();
        let mut growth = Worst::new();
        for k in 0..nt {
            let s = v.slice(k);
            for i in 0..nx - 1 {
                drop.see(s[i] - s[i + 1], i + 1, k);
                slope.see((s[i + 1] - s[i]) / dx, i + 1, k);
            }
            anchor.see(s[0].abs(), 0, k);
            for (i, val) in s.iter().enumerate() {
                growth.see(val.abs() / (1.0 + v.space().node(i)), i, k);
            }
        }
        let drop_limit = tol.monotone_tol * scale;
        out.push(drop.check(name("value_monotone"), v, side, drop_limit, drop.value <= drop_limit));
        let slope_limit = c.k_upper * (1.0 + tol.bound_slack);
        out.push(slope.check(
            name("value_slope_upper"),
            v,
            side,
            slope_limit,
            slope.value <= slope_limit,
        ));
        let anchor_limit = 10.0 * tol.tol;
        out.push(anchor.check(
            name("zero_quality_anchor"),
            v,
            side,
            anchor_limit,
            anchor.value <= anchor_limit,
        ));
        let growth_limit = c.pi * (1.0 + tol.bound_slack);
        out.push(growth.check(
            name("growth_bound"),
            v,
            side,
            growth_limit,
            growth.value <= growth_limit,
        ));

        // largest violation of 0 <= f(t_{k+1}) <= f(t_k) <= f0
        let mut dens = Worst::new();
        for k in 0..nt {
            for i in 0..nx {
                let val = f.get(i, k);
                let mut viol = (-val).max(val - f.get(i, 0));
                if k > 0 {
                    viol = viol.max(val - f.get(i, k - 1));
                }
                dens.see(viol, i, k);
            }
        }
        out.push(dens.check(name("density_bounds"), f, side, 0.0, dens.value <= 0.0));

        let mut mass = Worst::new();
        for k in 0..nt {
            let weighted: Vec<f64> = f
                .slice(k)
                .iter()
                .zip(f.space().nodes())
                .map(|(fv, x)| (1.0 + x) * fv)
                .collect();
            mass.see(riemann_sum_right(&weighted, dx), 0, k);
        }
        let mass_ok = mass.value <= c.mass_bound;
        out.push(mass.check(name("weighted_mass"), f, side, c.mass_bound, mass_ok));

        let last = nt - 1;
        let remaining = riemann_sum_right(f.slice(last), dx);
        let mut unmatched = Worst::new();
        unmatched.see(remaining, 0, last);
        out.push(unmatched.check(name("unmatched_positive"), f, side, 0.0, remaining > 0.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpatialGrid;
    use crate::market::Utility;
    use crate::solver::{solve_fixed_point, SolverOptions};

    fn labor_inputs() -> (SideInputs, SideInputs) {
        let a = SideInputs {
            lambda: 20.0,
            gamma: 0.013,
            gamma_upper: 0.013,
            l: 0.6,
            l_upper: 0.6,
            envelope: 2.0,
        };
        let b = SideInputs {
            lambda: 26.0,
            gamma: 0.05,
            gamma_upper: 0.05,
            l: 1.1,
            l_upper: 1.1,
            envelope: 3.0,
        };
        (a, b)
    }

    #[test]
    fn envelope_examples() {
        let nu = 0.5;
        let g = SpatialGrid::new(50.0, 500).unwrap();
        let tight: Vec<f64> = g.nodes().iter().map(|z| 1.0 / (1.0 + z.powf(2.0 + nu))).collect();
        assert_eq!(envelope_constant(g.nodes(), &tight, nu), 1.0 + 1e-9);
        let zero = vec![0.0; g.len()];
        assert_eq!(envelope_constant(g.nodes(), &zero, nu), 1.0 + 1e-9);
    }

    #[test]
    fn calibrated_envelope_stable_under_refinement() {
        let params = MarketParams::labor_market();
        let d = &params.side_b.initial_density;
        let coarse = SpatialGrid::new(7000.0, 200).unwrap();
        let fine = SpatialGrid::new(7000.0, 2000).unwrap();
        let c = |g: &SpatialGrid| {
            let f: Vec<f64> = g.nodes().iter().map(|z| d.pdf(*z)).collect();
            envelope_constant(g.nodes(), &f, 0.5)
        };
        let (cc, cf) = (c(&coarse), c(&fine));
        assert!(cc.is_finite() && cc > 1.0);
        assert!((cc - cf).abs() / cf < 0.01, "{cc} vs {cf}");
    }

    #[test]
    fn slope_lower_bounds_match_arithmetic() {
        let (a, b) = labor_inputs();
        let c = compute_constants(0.04, 1.0, 0.5, a, b);
        assert!((c.a.k - 0.013 / 26.04).abs() < 1e-15);
        assert!((c.a.k - 4.9923e-4).abs() < 5e-8);
        assert!((c.b.k - 2.4950e-3).abs() < 5e-8);
        let mut a0 = a;
        let mut b0 = b;
        a0.lambda = 1e-12;
        b0.lambda = 1e-12;
        let lim = compute_constants(0.04, 1.0, 0.5, a0, b0);
        assert!((lim.a.k - 0.013 / 0.04).abs() < 1e-9);
        assert!((lim.b.k - 1.1f64.min(0.05 / 0.04)).abs() < 1e-9);
    }

    #[test]
    fn constants_are_bit_reproducible_and_follow_definitions() {
        let (a, b) = labor_inputs();
        let c1 = compute_constants(0.04, 1.0, 0.5, a, b);
        let c2 = compute_constants(0.04, 1.0, 0.5, a, b);
        assert_eq!(c1, c2);
        let tail = 2f64.powf(1.5) / 0.5;
        let k_a = 0.013 / 26.04;
        let k_b = 0.05 / 20.04;
        assert_eq!(c1.a.k_upper, (26.0f64 * 3.0 / (0.04 * k_b) + 0.013 / 0.04).max(0.6));
        assert_eq!(c1.b.pi, (20.0 / 0.04 * (tail * 2.0 + 0.05)).max(1.1));
        assert_eq!(c1.a.m, 2f64.max(3.0 * (1.0 + k_a) / (k_a * k_a)));
        assert_eq!(c1.c_a, 26.0 * tail * 2.0);
        assert_eq!(c1.m2, (20.0 + 26.0 * tail * 2.0).max(26.0 + 20.0 * tail * 3.0));
        assert!(c1.delta_1 <= 1.0 / 104.0);
        assert!(c1.delta_2 <= 1.0);
    }

    #[test]
    fn no_match_examples() {
        let (mut a, mut b) = labor_inputs();
        let time = TimeGrid::new(1.0, 10).unwrap();
        let c = compute_constants(0.04, 1.0, 0.5, a, b);
        let r = check_no_match(&c, &time);
        assert!(!r.holds);
        let last = r.points.last().unwrap();
        assert!((last.product - 0.66).abs() < 1e-12);

        for s in [&mut a, &mut b] {
            s.l = 2.0;
            s.gamma = 2.0 * 0.04;
        }
        let r = check_no_match(&compute_constants(0.04, 1.0, 0.5, a, b), &time);
        assert!(r.holds);
        assert!(r.points.iter().all(|p| (p.product - 4.0).abs() < 1e-12));

        a.l = 0.0;
        a.gamma = 0.0;
        let r = check_no_match(&compute_constants(0.04, 1.0, 0.5, a, b), &time);
        assert!(!r.holds);
    }

    #[test]
    fn nonempty_examples() {
        let (a, b) = labor_inputs();
        let mut c = compute_constants(0.04, 1.0, 0.5, a, b);
        assert!(!check_nonempty(&c));
        c.a.k_upper = 1.0;
        c.b.k_upper = 1.0;
        assert!(check_nonempty(&c));
        c.a.k_upper = 0.5;
        c.b.k_upper = 1.9;
        assert!(check_nonempty(&c));
    }

    #[test]
    fn uniqueness_examples() {
        let (a, b) = labor_inputs();
        let r = check_uniqueness(&compute_constants(0.04, 1.0, 0.5, a, b));
        assert!(!r.cond_i && !r.cond_ii);
        assert!(r.cond_ii_rhs < 0.0);

        let (mut a, mut b) = labor_inputs();
        a.lambda = 1e-12;
        b.lambda = 1e-12;
        let r = check_uniqueness(&compute_constants(0.04, 1.0, 0.5, a, b));
        assert!(r.cond_i, "{r:?}");
    }

    fn no_match_run() -> (MarketParams, Grids, EquilibriumState) {
        let mut params = MarketParams::labor_market();
        for side in [&mut params.side_a, &mut params.side_b] {
            side.terminal = Utility::linear(2.0);
            side.running = Utility::linear(0.08);
        }
        let grids = Grids::new(7000.0, 40, 40, 1.0, 40).unwrap();
        let s = solve_fixed_point(&params, &grids, &SolverOptions::default()).unwrap();
        (params, grids, s)
    }

    #[test]
    fn audit_no_match_passes_with_closed_form_slopes() {
        let (params, grids, s) = no_match_run();
        let c = constants_for(&params, &grids, DEFAULT_NU);
        let report = audit_solution(&s, &c, &AuditTolerances::default());
        for chk in &report {
            assert!(chk.pass, "{chk:?}");
        }
        // V(x,t) = x [2 e^{-rho(T-t)} + 0.08 (1 - e^{-rho(T-t)})/rho] = 2x.
        for k in 0..=40 {
            let t = grids.time.node(k);
            let w = (-0.04 * (1.0 - t)).exp();
            let coef = 2.0 * w + 0.08 * (1.0 - w) / 0.04;
            let slope = (s.v_a.get(10, k) - s.v_a.get(9, k)) / grids.a.dx();
            assert!((slope - coef).abs() < 1e-3 * coef);
        }
    }

    #[test]
    fn audit_flags_injected_negative_density() {
        let (params, grids, mut s) = no_match_run();
        s.f_a.set(7, 5, -1e-6);
        let c = constants_for(&params, &grids, DEFAULT_NU);
        let report = audit_solution(&s, &c, &AuditTolerances::default());
        let chk = report.iter().find(|c| c.check_name == "density_bounds[A]").unwrap();
        assert!(!chk.pass);
        let loc = chk.worst_location.unwrap();
        // the negative cell also breaks monotonicity in t at k = 6
        assert!((loc.i, loc.k) == (7, 5) || (loc.i, loc.k) == (7, 6));
        assert_eq!(loc.i, 7);
        assert!(report.iter().filter(|c| !c.pass).count() >= 1);
    }
}
