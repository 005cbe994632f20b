//! Solver for the mean-field equation `∂v = ½v'' − (Ψ'(0+)/2)v²` started
//! from an initial trace `(Λ, μ)`: a closed set `Λ` where the solution is
//! infinite at time 0 and a finite atomic measure `μ` outside it.
//!
//! The solution starts at a small time `t_floor` from the maximal
//! self-similar value `2/(Ψ'(0+) t_floor)` on `Λ` plus heat-smoothed atoms.
//! Each step applies an explicit diffusion step and then the exact pointwise
//! solution of the sink `v' = −(Ψ'/2)v²`, which keeps the constant solution
//! `2/(Ψ'(0+) t)` exact.

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, SpdeError};
use crate::spde::{Boundary, Grid};
use crate::stats::heat_kernel;

/// Direction in which a declared-infinite atom list continues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
    Both,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialTrace {
    /// Closed intervals `[a, b]`, sorted and disjoint; endpoints may be infinite.
    #[serde(default)]
    pub intervals: Vec<(f64, f64)>,
    /// `(position, weight)` atoms outside the intervals.
    #[serde(default)]
    pub atoms: Vec<(f64, f64)>,
    /// The listed atoms are a truncation of a list that continues without
    /// bound in this direction.
    #[serde(default)]
    pub unbounded_atoms: Option<Side>,
}

impl InitialTrace {
    pub fn interval(a: f64, b: f64) -> Self {
        Self { intervals: vec![(a, b)], ..Self::default() }
    }

    pub fn whole_line() -> Self {
        Self::interval(f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (k, &(a, b)) in self.intervals.iter().enumerate() {
            if a.is_nan() || b.is_nan() || a > b || a == f64::INFINITY || b == f64::NEG_INFINITY {
                return Err(ConfigError::invalid("intervals", format!("[{a}, {b}] is not an interval")));
            }
            if k > 0 && self.intervals[k - 1].1 >= a {
                return Err(ConfigError::invalid("intervals", "must be sorted and disjoint"));
            }
        }
        for &(x, w) in &self.atoms {
            if !x.is_finite() || !(w > 0.0 && w.is_finite()) {
                return Err(ConfigError::invalid("atoms", format!("({x}, {w}) needs finite position and weight > 0")));
            }
            if self.in_lambda(x) {
                return Err(ConfigError::invalid("atoms", format!("atom at {x} lies inside an interval")));
            }
        }
        Ok(())
    }

    pub fn in_lambda(&self, x: f64) -> bool {
        self.intervals.iter().any(|&(a, b)| x >= a && x <= b)
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty() && self.atoms.is_empty()
    }

    fn unbounded_left(&self) -> bool {
        self.intervals.first().is_some_and(|i| i.0 == f64::NEG_INFINITY)
    }

    fn unbounded_right(&self) -> bool {
        self.intervals.last().is_some_and(|i| i.1 == f64::INFINITY)
    }

    /// Mirror image `x ↦ −x`.
    pub fn reflected(&self) -> Self {
        Self {
            intervals: self.intervals.iter().rev().map(|&(a, b)| (-b, -a)).collect(),
            atoms: self.atoms.iter().rev().map(|&(x, w)| (-x, w)).collect(),
            unbounded_atoms: self.unbounded_atoms.map(|s| match s {
                Side::Left => Side::Right,
                Side::Right => Side::Left,
                Side::Both => Side::Both,
            }),
        }
    }

    /// Translate by `z`.
    pub fn shifted(&self, z: f64) -> Self {
        Self {
            intervals: self.intervals.iter().map(|&(a, b)| (a + z, b + z)).collect(),
            atoms: self.atoms.iter().map(|&(x, w)| (x + z, w)).collect(),
            unbounded_atoms: self.unbounded_atoms,
        }
    }

    /// Multiply atom weights by `c`.
    pub fn scaled_atoms(&self, c: f64) -> Self {
        Self { atoms: self.atoms.iter().map(|&(x, w)| (x, c * w)).collect(), ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrability {
    Bounded,
    Unbounded,
}

/// Whether `U ∩ supp(Λ, μ)` is bounded, for the open interval `U = (a, b)`.
pub fn classify_integrability(trace: &InitialTrace, u: (f64, f64)) -> Integrability {
    let (a, b) = u;
    let meets_right = |lo: f64, hi: f64| hi == f64::INFINITY && b == f64::INFINITY && lo.max(a) < f64::INFINITY;
    let meets_left = |lo: f64, hi: f64| lo == f64::NEG_INFINITY && a == f64::NEG_INFINITY && hi.min(b) > f64::NEG_INFINITY;
    let interval_hit = trace.intervals.iter().any(|&(lo, hi)| meets_right(lo, hi) || meets_left(lo, hi));
    let atom_hit = match trace.unbounded_atoms {
        None => false,
        Some(Side::Right) => b == f64::INFINITY,
        Some(Side::Left) => a == f64::NEG_INFINITY,
        Some(Side::Both) => a == f64::NEG_INFINITY || b == f64::INFINITY,
    };
    if interval_hit || atom_hit {
        Integrability::Unbounded
    } else {
        Integrability::Bounded
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfeConfig {
    pub grid: Grid,
    pub t_floor: f64,
    pub dt: f64,
    /// Drop the quadratic sink (heat-equation comparison runs).
    #[serde(default)]
    pub linear: bool,
}

impl MfeConfig {
    pub fn new(grid: Grid, t_floor: f64) -> Self {
        Self { grid, t_floor, dt: grid.max_dt(), linear: false }
    }

    pub fn validate(&self) -> Result<(), SpdeError> {
        self.grid.validate()?;
        if !(self.t_floor.is_finite() && self.t_floor > 0.0) {
            return Err(ConfigError::invalid("t_floor", format!("{} must be > 0", self.t_floor)).into());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(ConfigError::invalid("dt", format!("{} must be > 0", self.dt)).into());
        }
        let limit = self.grid.max_dt();
        if self.dt > limit * (1.0 + 1e-12) {
            return Err(SpdeError::StabilityViolation { dt: self.dt, limit });
        }
        Ok(())
    }
}

/// `2/(Ψ'(0+) t)`, the solution from the whole line.
pub fn cap(psi_prime0: f64, t: f64) -> f64 {
    2.0 / (psi_prime0 * t)
}

/// Field at `t_floor`: the cap on `Λ`, heat-smoothed atoms elsewhere,
/// everything capped.
pub fn init_at_floor(trace: &InitialTrace, psi_prime0: f64, grid: &Grid, t_floor: f64) -> Vec<f64> {
    let c = cap(psi_prime0, t_floor);
    grid.centers()
        .map(|x| {
            if trace.in_lambda(x) {
                return c;
            }
            let atoms: f64 = trace.atoms.iter().map(|&(x0, w)| w * heat_kernel(t_floor, x - x0)).sum();
            atoms.min(c)
        })
        .collect()
}

/// One sampled time of a solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfeSnapshot {
    /// Requested time.
    pub time: f64,
    /// Time actually reached on the step lattice from `t_floor`.
    pub solved_time: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfeSolution {
    pub grid: Grid,
    pub snapshots: Vec<MfeSnapshot>,
}

impl MfeSolution {
    pub fn at(&self, t: f64) -> Option<&MfeSnapshot> {
        self.snapshots.iter().find(|s| (s.time - t).abs() <= 1e-9 * t.max(1.0))
    }
}

/// A configured mean-field solver.
#[derive(Debug, Clone)]
pub struct MfeSolver {
    pub psi_prime0: f64,
    pub config: MfeConfig,
}

impl MfeSolver {
    pub fn new(psi_prime0: f64, config: MfeConfig) -> Result<Self, SpdeError> {
        if !(psi_prime0 > 0.0 && psi_prime0.is_finite()) {
            return Err(ConfigError::invalid("psi_prime0", format!("{psi_prime0} must be > 0")).into());
        }
        config.validate()?;
        Ok(Self { psi_prime0, config })
    }

    fn steps_to(&self, from: f64, to: f64) -> usize {
        ((to - from) / self.config.dt).round().max(0.0) as usize
    }

    /// Solves from `t_floor`, calling `observe(t, v)` after initialisation
    /// and after every step until `horizon`.
    pub fn solve_with(
        &self,
        trace: &InitialTrace,
        horizon: f64,
        mut observe: impl FnMut(f64, &[f64]),
    ) -> Result<(), SpdeError> {
        trace.validate()?;
        let grid = &self.config.grid;
        let dt = self.config.dt;
        let half_psi = 0.5 * self.psi_prime0;
        let diff = 0.5 * dt / (grid.dx * grid.dx);
        let periodic = grid.boundary == Boundary::Periodic;
        let (ghost_left, ghost_right) = (trace.unbounded_left(), trace.unbounded_right());

        let t0 = self.config.t_floor;
        let mut v = init_at_floor(trace, self.psi_prime0, grid, t0);
        let mut next = vec![0.0; v.len()];
        observe(t0, &v);
        let n = v.len();
        let steps = self.steps_to(t0, horizon);
        for k in 0..steps {
            let t = t0 + k as f64 * dt;
            let c = cap(self.psi_prime0, t);
            let left_ghost = if periodic { v[n - 1] } else if ghost_left { c } else { 0.0 };
            let right_ghost = if periodic { v[0] } else if ghost_right { c } else { 0.0 };
            for i in 0..n {
                let left = if i > 0 { v[i - 1] } else { left_ghost };
                let right = if i + 1 < n { v[i + 1] } else { right_ghost };
                let u = v[i] + diff * ((left + right) - 2.0 * v[i]);
                next[i] = if self.config.linear { u } else { u / (1.0 + half_psi * u * dt) };
            }
            std::mem::swap(&mut v, &mut next);
            let t_new = t0 + (k + 1) as f64 * dt;
            if !self.config.linear {
                let c_new = cap(self.psi_prime0, t_new);
                if let Some(&bad) = v.iter().find(|&&x| x > c_new * (1.0 + 1e-9)) {
                    return Err(SpdeError::BlowUp { value: bad, cap: c_new, time: t_new });
                }
            }
            observe(t_new, &v);
        }
        Ok(())
    }

    /// Snapshots at the requested times (each rounded to the step lattice
    /// from `t_floor`; times at or below `t_floor` are skipped).
    pub fn solve(&self, trace: &InitialTrace, times: &[f64]) -> Result<MfeSolution, SpdeError> {
        let t0 = self.config.t_floor;
        let mut wanted: Vec<(usize, f64)> = times
            .iter()
            .filter(|&&t| t > t0)
            .map(|&t| (self.steps_to(t0, t), t))
            .collect();
        wanted.sort_by_key(|w| w.0);
        let horizon = times.iter().copied().fold(t0, f64::max);
        let mut snapshots = Vec::with_capacity(wanted.len());
        let mut step = 0usize;
        let mut idx = 0;
        self.solve_with(trace, horizon, |t, v| {
            while idx < wanted.len() && wanted[idx].0 == step {
                snapshots.push(MfeSnapshot { time: wanted[idx].1, solved_time: t, values: v.to_vec() });
                idx += 1;
            }
            step += 1;
        })?;
        Ok(MfeSolution { grid: self.config.grid, snapshots })
    }

    /// `𝒱_t = ∫₀^t ∫_{F^c} v_r² dz dr` for `F = [f_lo, f_hi]`, trapezoidal
    /// in time from `t_floor`. The missing `[0, t_floor)` piece is handled by
    /// Richardson extrapolation against a run with `t_floor/2`.
    pub fn v_script(&self, trace: &InitialTrace, f: (f64, f64), t: f64) -> Result<f64, SpdeError> {
        let coarse = self.v_script_from_floor(trace, f, t)?;
        let mut half = self.clone();
        half.config.t_floor *= 0.5;
        let fine = half.v_script_from_floor(trace, f, t)?;
        Ok((2.0 * fine - coarse).max(0.0))
    }

    /// `∫_{t_floor}^t ∫_{F^c} v_r² dz dr` without extrapolation.
    pub fn v_script_from_floor(&self, trace: &InitialTrace, f: (f64, f64), t: f64) -> Result<f64, SpdeError> {
        if trace.is_empty() {
            return Ok(0.0);
        }
        let grid = self.config.grid;
        let weights: Vec<f64> = grid
            .centers()
            .map(|x| if x >= f.0 && x <= f.1 { 0.0 } else { grid.dx })
            .collect();
        let mut total = 0.0;
        let mut prev: Option<(f64, f64)> = None;
        self.solve_with(trace, t, |time, v| {
            let inner: f64 = v.iter().zip(&weights).map(|(x, w)| w * x * x).sum();
            if let Some((pt, pv)) = prev {
                total += 0.5 * (time - pt) * (inner + pv);
            }
            prev = Some((time, inner));
        })?;
        Ok(total)
    }
}

/// `∫_a^b` of the piecewise-linear interpolant through the cell centres.
/// `U` must lie within the span of the centres.
pub fn integral_over(grid: &Grid, values: &[f64], u: (f64, f64)) -> Result<f64, SpdeError> {
    let lo = grid.center(0);
    let hi = grid.center(grid.n_cells - 1);
    let (a, b) = u;
    for p in [a, b] {
        if !(p >= lo && p <= hi) {
            return Err(SpdeError::OutOfGrid { point: p, min: lo, max: hi });
        }
    }
    if b <= a {
        return Ok(0.0);
    }
    let interp = |x: f64| {
        let s = (x - lo) / grid.dx;
        let i = (s.floor() as usize).min(grid.n_cells - 2);
        let w = s - i as f64;
        values[i] * (1.0 - w) + values[i + 1] * w
    };
    let ia = ((a - lo) / grid.dx).floor() as usize + 1;
    let ib = ((b - lo) / grid.dx).ceil() as usize;
    // Nodes: a, interior centres, b.
    let mut xs = vec![a];
    let mut ys = vec![interp(a)];
    for i in ia..ib.min(grid.n_cells) {
        let x = grid.center(i);
        if x > a && x < b {
            xs.push(x);
            ys.push(values[i]);
        }
    }
    xs.push(b);
    ys.push(interp(b));
    Ok(crate::quadrature::trapezoid(&xs, &ys))
}

/// Largest `v_t(x) / [(1/t)(1 + x/√t) e^{−x²/t}]` over cell centres with
/// `x ≥ x_min_fit` (the half-line decay constant for `Λ = (−∞, 0]`).
pub fn half_line_decay_constant(grid: &Grid, values: &[f64], t: f64, x_min_fit: f64) -> f64 {
    grid.centers()
        .zip(values)
        .filter(|(x, _)| *x >= x_min_fit)
        .map(|(x, &v)| v / ((1.0 / t) * (1.0 + x / t.sqrt()) * (-x * x / t).exp()))
        .filter(|r| r.is_finite())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solver(psi: f64, lo: f64, hi: f64, dx: f64, boundary: Boundary, t_floor: f64) -> MfeSolver {
        MfeSolver::new(psi, MfeConfig::new(Grid::covering(lo, hi, dx, boundary), t_floor)).unwrap()
    }

    #[test]
    fn init_examples() {
        let g = Grid::covering(-1.0, 1.0, 0.01, Boundary::Periodic);
        let v = init_at_floor(&InitialTrace::whole_line(), 2.0, &g, 0.01);
        assert!(v.iter().all(|&x| (x - 100.0).abs() < 1e-12));
        let atom = InitialTrace { atoms: vec![(0.0, 1.0)], ..Default::default() };
        let v = init_at_floor(&atom, 1.0, &g, 0.01);
        let peak = v.iter().copied().fold(0.0, f64::max);
        assert!(peak <= 200.0 && peak > 3.0);
        let v = init_at_floor(&InitialTrace::default(), 1.0, &g, 0.01);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn whole_line_trace_is_self_similar() {
        let s = solver(1.5, 0.0, 1.0, 0.02, Boundary::Periodic, 1e-3);
        let times: Vec<f64> = (2..=10).map(|k| k as f64 * 1e-3).collect();
        let sol = s.solve(&InitialTrace::whole_line(), &times).unwrap();
        for snap in &sol.snapshots {
            let exact = cap(1.5, snap.time);
            for &v in &snap.values {
                assert!((v - exact).abs() <= 1e-9 * exact);
            }
            let i = integral_over(&sol.grid, &snap.values, (0.2, 0.8)).unwrap();
            assert!((i - 0.6 * exact).abs() < 1e-9 * exact);
        }
    }

    #[test]
    fn empty_trace_stays_zero() {
        let s = solver(1.0, -1.0, 1.0, 0.05, Boundary::DirichletZero, 1e-3);
        let sol = s.solve(&InitialTrace::default(), &[0.01, 0.1]).unwrap();
        assert!(sol.snapshots.iter().all(|sn| sn.values.iter().all(|&v| v == 0.0)));
        assert_eq!(s.v_script(&InitialTrace::default(), (0.0, 1.0), 0.1).unwrap(), 0.0);
    }

    #[test]
    fn solution_respects_cap_and_heat_comparison() {
        let g = Grid::covering(-3.0, 4.0, 0.02, Boundary::DirichletZero);
        let trace = InitialTrace { intervals: vec![(0.0, 1.0)], atoms: vec![(2.0, 0.5)], unbounded_atoms: None };
        let nl = MfeSolver::new(1.0, MfeConfig::new(g, 1e-3)).unwrap();
        let mut lin_cfg = MfeConfig::new(g, 1e-3);
        lin_cfg.linear = true;
        let lin = MfeSolver::new(1.0, lin_cfg).unwrap();
        let times = [0.01, 0.05, 0.1];
        let a = nl.solve(&trace, &times).unwrap();
        let b = lin.solve(&trace, &times).unwrap();
        for (sa, sb) in a.snapshots.iter().zip(&b.snapshots) {
            let c = cap(1.0, sa.time);
            for (x, y) in sa.values.iter().zip(&sb.values) {
                assert!(*x >= 0.0 && *x <= c * (1.0 + 1e-12));
                assert!(x <= y);
            }
        }
    }

    #[test]
    fn classify_examples() {
        let half = InitialTrace::interval(0.0, f64::INFINITY);
        assert_eq!(classify_integrability(&half, (-1.0, 1.0)), Integrability::Bounded);
        assert_eq!(classify_integrability(&half, (0.0, f64::INFINITY)), Integrability::Unbounded);
        assert_eq!(classify_integrability(&half, (f64::NEG_INFINITY, 0.0)), Integrability::Bounded);
        let lattice = InitialTrace {
            atoms: (0..10).map(|k| (k as f64 + 0.5, 1.0)).collect(),
            unbounded_atoms: Some(Side::Right),
            ..Default::default()
        };
        assert_eq!(classify_integrability(&lattice, (0.0, f64::INFINITY)), Integrability::Unbounded);
        assert_eq!(classify_integrability(&lattice, (0.0, 100.0)), Integrability::Bounded);
    }

    #[test]
    fn trace_validation() {
        assert!(InitialTrace { intervals: vec![(0.0, 2.0), (1.0, 3.0)], ..Default::default() }.validate().is_err());
        assert!(InitialTrace { intervals: vec![(0.0, 2.0)], atoms: vec![(1.0, 1.0)], ..Default::default() }
            .validate()
            .is_err());
        assert!(InitialTrace { atoms: vec![(1.0, -1.0)], ..Default::default() }.validate().is_err());
        assert!(InitialTrace::whole_line().validate().is_ok());
    }

    #[test]
    fn integral_of_constant() {
        let g = Grid::covering(0.0, 2.0, 0.1, Boundary::DirichletZero);
        let v = vec![3.0; g.n_cells];
        assert!((integral_over(&g, &v, (0.33, 1.71)).unwrap() - 3.0 * 1.38).abs() < 1e-12);
        assert_eq!(integral_over(&g, &vec![0.0; g.n_cells], (0.5, 1.5)).unwrap(), 0.0);
        assert!(integral_over(&g, &v, (0.0, 1.0)).is_err());
    }
}
