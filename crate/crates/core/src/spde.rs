//! Finite-difference solver for the dual SPDE
//! `∂u = ½Δu − Φ(u) + √Ψ(u) Ẇ`, `u ∈ [0, z*]`, on a uniform cell grid.
//!
//! One explicit step per cell:
//! `u' = u + dt(½(u₋ − 2u + u₊)/dx² − Φ(u)) + noise` with noise of mean 0
//! and variance `Ψ(u)·dt/dx`, followed by clamping to `[0, z*]`. See
//! [`NoiseScheme`] for how the noise is drawn.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, SpdeError};
use crate::mechanisms::Mechanism;
use crate::quadrature::GaussLegendre;
use crate::rng::SimRng;
use crate::stats::{bm_interval_prob, heat_kernel, Accumulator, MeanSe};
use crate::tabulated::Tabulated;

pub const MIN_CELLS: usize = 8;
/// Values above this count as support in [`support_extent`].
pub const SUPPORT_THRESHOLD: f64 = 1e-12;
/// Poisson intensity above which the Poisson–Gamma noise step is replaced
/// by its Gaussian limit.
const GAUSSIAN_LIMIT_INTENSITY: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    DirichletZero,
    Periodic,
}

/// `n_cells` cells of width `dx` starting at `x_min`; cell `i` is centred at
/// `x_min + (i + ½)dx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub x_min: f64,
    pub dx: f64,
    pub n_cells: usize,
    #[serde(default)]
    pub boundary: Boundary,
}

impl Grid {
    /// Grid covering `[lo, hi]` with spacing close to `dx`.
    pub fn covering(lo: f64, hi: f64, dx: f64, boundary: Boundary) -> Self {
        let n_cells = ((hi - lo) / dx).round().max(1.0) as usize;
        Self { x_min: lo, dx: (hi - lo) / n_cells as f64, n_cells, boundary }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.dx.is_finite() && self.dx > 0.0) {
            return Err(ConfigError::invalid("dx", format!("{} must be > 0", self.dx)));
        }
        if !self.x_min.is_finite() {
            return Err(ConfigError::invalid("x_min", "must be finite"));
        }
        if self.n_cells < MIN_CELLS {
            return Err(ConfigError::invalid("n_cells", format!("{} < {MIN_CELLS}", self.n_cells)));
        }
        Ok(())
    }

    pub fn center(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.n_cells as f64 * self.dx
    }

    pub fn centers(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_cells).map(|i| self.center(i))
    }

    /// Largest stable explicit step with the default margin, `dx²/2`.
    pub fn max_dt(&self) -> f64 {
        0.5 * self.dx * self.dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScheme {
    /// Gaussian increment `√Ψ(u)·√(dt/dx)·ξ`, then clamping. Clamping at 0
    /// inflates the mean of small values, which biases products of
    /// `1 − u` downwards; kept for comparison runs.
    Gaussian,
    /// Same mean and variance, drawn as a Poisson mixture of Gamma variables
    /// (the exact one-step law of a Feller diffusion with frozen
    /// coefficient). Non-negative without clamping at 0, so it does not
    /// inflate the mean of small values.
    #[default]
    PoissonGamma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpdeConfig {
    pub grid: Grid,
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub noise: NoiseScheme,
}

fn default_replicas() -> usize {
    1000
}

impl SpdeConfig {
    /// Config on `grid` with the default step `dx²/2`.
    pub fn new(grid: Grid) -> Self {
        Self { grid, dt: grid.max_dt(), seed: 0, replicas: default_replicas(), noise: NoiseScheme::default() }
    }

    pub fn validate(&self) -> Result<(), SpdeError> {
        self.grid.validate()?;
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldState {
    pub time: f64,
    pub values: Vec<f64>,
}

/// Initial datum `f` of the SPDE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitialDatum {
    /// `eps · 1_{(a, b)}`.
    ScaledIndicator { eps: f64, a: f64, b: f64 },
    /// `1 − exp(−g)` for a tabulated `g ≥ 0` (zero outside its range).
    OneMinusExp { g: Tabulated },
    Constant { value: f64 },
    /// Tabulated values (zero outside the range).
    Tabulated { f: Tabulated },
}

impl InitialDatum {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            InitialDatum::ScaledIndicator { eps, a, b } => {
                if x > *a && x < *b {
                    *eps
                } else {
                    0.0
                }
            }
            InitialDatum::OneMinusExp { g } => g.eval(x).map_or(0.0, |v| -(-v).exp_m1()),
            InitialDatum::Constant { value } => *value,
            InitialDatum::Tabulated { f } => f.eval(x).unwrap_or(0.0),
        }
    }

    /// `E_x[f(B_t)]` by closed form or heat-kernel quadrature.
    pub fn heat_semigroup(&self, t: f64, x: f64) -> f64 {
        if t <= 0.0 {
            return self.eval(x);
        }
        let (lo, hi) = match self {
            InitialDatum::ScaledIndicator { eps, a, b } => return eps * bm_interval_prob(x, t, *a, *b),
            InitialDatum::Constant { value } => return *value,
            InitialDatum::OneMinusExp { g } => (g.x_min, g.x_max()),
            InitialDatum::Tabulated { f } => (f.x_min, f.x_max()),
        };
        let rule = GaussLegendre::new(8);
        rule.integrate_composite(lo, hi, 400, |y| heat_kernel(t, x - y) * self.eval(y))
    }
}

/// Cell values `f(center)`; errors if `f` leaves `[0, z*]`.
pub fn init_field(grid: &Grid, datum: &InitialDatum, z_star: f64) -> Result<FieldState, SpdeError> {
    let mut values = Vec::with_capacity(grid.n_cells);
    for x in grid.centers() {
        let v = datum.eval(x);
        if !(v >= 0.0 && v <= z_star + 1e-12) {
            return Err(SpdeError::OutOfRange { value: v, z_star });
        }
        values.push(v.min(z_star));
    }
    Ok(FieldState { time: 0.0, values })
}

/// An SPDE solver bound to a mechanism and a validated config.
#[derive(Debug, Clone)]
pub struct SpdeSolver {
    pub mechanism: Mechanism,
    pub config: SpdeConfig,
}

impl SpdeSolver {
    pub fn new(mechanism: Mechanism, config: SpdeConfig) -> Result<Self, SpdeError> {
        config.validate()?;
        Ok(Self { mechanism, config })
    }

    pub fn grid(&self) -> &Grid {
        &self.config.grid
    }

    pub fn init(&self, datum: &InitialDatum) -> Result<FieldState, SpdeError> {
        init_field(&self.config.grid, datum, self.mechanism.z_star())
    }

    /// Index range whose cells can change this step. Under Dirichlet
    /// boundaries a zero cell with zero neighbours stays zero exactly
    /// (Φ(0) = Ψ(0) = 0), so only the non-zero block plus one cell either side
    /// is updated.
    fn active_range(&self, values: &[f64]) -> Option<(usize, usize)> {
        let n = values.len();
        if self.config.grid.boundary == Boundary::Periodic {
            return Some((0, n - 1));
        }
        let first = values.iter().position(|&v| v != 0.0)?;
        let last = values.iter().rposition(|&v| v != 0.0)?;
        Some((first.saturating_sub(1), (last + 1).min(n - 1)))
    }

    /// Deterministic part `u + dt(½Δu − Φ(u))` for cells `lo..=hi`.
    fn drift(&self, values: &[f64], lo: usize, hi: usize, out: &mut Vec<f64>) {
        let n = values.len();
        let periodic = self.config.grid.boundary == Boundary::Periodic;
        let dx = self.config.grid.dx;
        let dt = self.config.dt;
        let diff = 0.5 * dt / (dx * dx);
        out.clear();
        for i in lo..=hi {
            let left = if i > 0 {
                values[i - 1]
            } else if periodic {
                values[n - 1]
            } else {
                0.0
            };
            let right = if i + 1 < n {
                values[i + 1]
            } else if periodic {
                values[0]
            } else {
                0.0
            };
            let u = values[i];
            out.push(u + diff * ((left + right) - 2.0 * u) - dt * self.mechanism.phi(u));
        }
    }

    fn noise_sd(&self, u: f64) -> f64 {
        // z* is a root of Ψ by definition; do not let the bisection residue
        // inject noise at the fixed point.
        if u >= self.mechanism.z_star() {
            return 0.0;
        }
        let psi = self.mechanism.psi(u).max(0.0);
        (psi * self.config.dt / self.config.grid.dx).sqrt()
    }

    /// One Euler–Maruyama step with the configured noise scheme.
    pub fn em_step(&self, state: &mut FieldState, rng: &mut SimRng) {
        let Some((lo, hi)) = self.active_range(&state.values) else {
            state.time += self.config.dt;
            return;
        };
        let z_star = self.mechanism.z_star();
        let mut next = Vec::with_capacity(hi - lo + 1);
        self.drift(&state.values, lo, hi, &mut next);
        for (k, v) in next.iter_mut().enumerate() {
            let u = state.values[lo + k];
            let sd = self.noise_sd(u);
            let w = if sd == 0.0 {
                *v
            } else {
                match self.config.noise {
                    NoiseScheme::Gaussian => {
                        let xi: f64 = rng.sample(StandardNormal);
                        *v + sd * xi
                    }
                    NoiseScheme::PoissonGamma => poisson_gamma(v.max(0.0), sd * sd, rng),
                }
            };
            *v = w.clamp(0.0, z_star);
        }
        state.values[lo..=hi].copy_from_slice(&next);
        state.time += self.config.dt;
    }

    /// One Gaussian step driven by a caller-supplied standard-normal array
    /// (one entry per cell), for coupled runs sharing their noise.
    pub fn em_step_with_noise(&self, state: &mut FieldState, noise: &[f64]) {
        assert_eq!(noise.len(), state.values.len());
        let n = state.values.len();
        let z_star = self.mechanism.z_star();
        let mut next = Vec::with_capacity(n);
        self.drift(&state.values, 0, n - 1, &mut next);
        for (i, v) in next.iter_mut().enumerate() {
            let sd = self.noise_sd(state.values[i]);
            *v = (*v + sd * noise[i]).clamp(0.0, z_star);
        }
        state.values = next;
        state.time += self.config.dt;
    }

    /// Steps until `t` (rounded to a whole number of steps).
    pub fn run_to(&self, state: &mut FieldState, t: f64, rng: &mut SimRng) {
        let steps = ((t - state.time) / self.config.dt).round().max(0.0) as usize;
        for _ in 0..steps {
            self.em_step(state, rng);
        }
    }

    /// Runs one replica and samples it at each of `times` (ascending).
    pub fn sample_path(
        &self,
        datum: &InitialDatum,
        times: &[f64],
        points: &[f64],
        rng: &mut SimRng,
    ) -> Result<Vec<Vec<f64>>, SpdeError> {
        let mut state = self.init(datum)?;
        let mut out = Vec::with_capacity(times.len());
        for &t in times {
            self.run_to(&mut state, t, rng);
            out.push(sample_at(&self.config.grid, &state, points)?);
        }
        Ok(out)
    }
}

/// Mean-`mean`, variance-`var` non-negative draw: `Gamma(N, θ)` with
/// `N ~ Poisson(mean/θ)`, `θ = var/(2·mean)`.
fn poisson_gamma(mean: f64, var: f64, rng: &mut SimRng) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    let theta = var / (2.0 * mean);
    let intensity = mean / theta;
    if !(theta > 0.0) || intensity > GAUSSIAN_LIMIT_INTENSITY || !intensity.is_finite() {
        let xi: f64 = rng.sample(StandardNormal);
        return mean + var.sqrt() * xi;
    }
    let n = Poisson::new(intensity).expect("positive finite intensity").sample(rng);
    if n == 0.0 {
        return 0.0;
    }
    Gamma::new(n, theta).expect("positive shape and scale").sample(rng)
}

/// Linear interpolation between cell centres.
pub fn sample_at(grid: &Grid, state: &FieldState, points: &[f64]) -> Result<Vec<f64>, SpdeError> {
    let lo = grid.center(0);
    let hi = grid.center(grid.n_cells - 1);
    points
        .iter()
        .map(|&x| {
            if !(x >= lo && x <= hi) {
                return Err(SpdeError::OutOfGrid { point: x, min: lo, max: hi });
            }
            let mut s = (x - lo) / grid.dx;
            if (s - s.round()).abs() < 1e-9 {
                s = s.round();
            }
            let i = (s.floor() as usize).min(grid.n_cells - 2);
            let w = s - i as f64;
            Ok(if w == 0.0 {
                state.values[i]
            } else {
                state.values[i] * (1.0 - w) + state.values[i + 1] * w
            })
        })
        .collect()
}

/// First and last cell index with value above `threshold`, or `None`.
pub fn support_extent(state: &FieldState, threshold: f64) -> Option<(usize, usize)> {
    let first = state.values.iter().position(|&v| v > threshold)?;
    let last = state.values.iter().rposition(|&v| v > threshold)?;
    Some((first, last))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanBoundPoint {
    pub x: f64,
    pub mean: MeanSe,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanBoundReport {
    pub t: f64,
    pub replicas: usize,
    pub points: Vec<MeanBoundPoint>,
}

impl MeanBoundReport {
    pub fn pass(&self) -> bool {
        self.points.iter().all(|p| p.holds)
    }
}

/// Compares the Monte Carlo mean of `u_t(x)` with `e^{λ_o t} E_x[f(B_t)]`,
/// flagging exceedances beyond three standard errors.
pub fn mean_bound_check(
    solver: &SpdeSolver,
    datum: &InitialDatum,
    t: f64,
    points: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<MeanBoundReport, SpdeError> {
    let mut acc = vec![Accumulator::new(); points.len()];
    for r in 0..replicas {
        let mut rng = crate::rng::stream(seed, crate::rng::Purpose::Field, r as u64);
        let path = solver.sample_path(datum, &[t], points, &mut rng)?;
        for (a, &v) in acc.iter_mut().zip(&path[0]) {
            a.push(v);
        }
    }
    let growth = (solver.mechanism.constants.lambda_o * t).exp();
    let points = points
        .iter()
        .zip(acc)
        .map(|(&x, a)| {
            let mean = a.summary();
            let bound = growth * datum.heat_semigroup(t, x);
            MeanBoundPoint { x, holds: mean.mean <= bound + 3.0 * mean.se, mean, bound }
        })
        .collect();
    Ok(MeanBoundReport { t, replicas, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicLimitReport {
    pub t: f64,
    pub points: Vec<f64>,
    pub values: Vec<f64>,
    pub reference: Vec<f64>,
    /// Largest `|value − reference| / reference` over the points.
    pub max_relative_error: f64,
}

/// Runs the scheme with the catalytic part zeroed (`Ψ ≡ 0`, so no noise) and
/// compares it with the semilinear heat equation `∂u = ½Δu − Φ(u)`. The
/// reference is the closed-form heat semigroup when `β_o = 0`, otherwise the
/// same scheme on a grid refined by two (`dx/2`, `dt/4`).
pub fn deterministic_limit_check(
    spec: &crate::mechanisms::BranchingSpec,
    datum: &InitialDatum,
    grid: Grid,
    t: f64,
    points: &[f64],
) -> Result<DeterministicLimitReport, SpdeError> {
    let mechanism = Mechanism::new(spec.clone(), crate::mechanisms::OracleMode::NO_CATALYTIC)?;
    let run = |g: Grid| -> Result<Vec<f64>, SpdeError> {
        let solver = SpdeSolver::new(mechanism.clone(), SpdeConfig::new(g))?;
        // Ψ ≡ 0 makes every step deterministic; the stream is never drawn.
        let mut rng = crate::rng::stream(0, crate::rng::Purpose::Field, 0);
        let mut state = solver.init(datum)?;
        solver.run_to(&mut state, t, &mut rng);
        sample_at(solver.grid(), &state, points)
    };
    let values = run(grid)?;
    let reference: Vec<f64> = if mechanism.beta_o() == 0.0 {
        points.iter().map(|&x| datum.heat_semigroup(t, x)).collect()
    } else {
        run(Grid { dx: grid.dx / 2.0, n_cells: grid.n_cells * 2, ..grid })?
    };
    let max_relative_error = values
        .iter()
        .zip(&reference)
        .map(|(v, r)| if *r == 0.0 { v.abs() } else { (v - r).abs() / r.abs() })
        .fold(0.0, f64::max);
    Ok(DeterministicLimitReport { t, points: points.to_vec(), values, reference, max_relative_error })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportScan {
    pub t: f64,
    pub replicas: usize,
    pub ks: Vec<f64>,
    /// Fraction of replicas whose support reaches a cell with `|x| > K`.
    pub exceedance: Vec<f64>,
}

impl SupportScan {
    pub fn non_increasing(&self) -> bool {
        self.exceedance.windows(2).all(|w| w[1] <= w[0])
    }
}

/// For each `K`, the fraction of replicas whose support at time `t` (cells
/// above [`SUPPORT_THRESHOLD`]) extends beyond `|x| = K`.
pub fn support_exceedance_scan(
    solver: &SpdeSolver,
    datum: &InitialDatum,
    t: f64,
    ks: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<SupportScan, SpdeError> {
    let grid = solver.grid();
    let mut hits = vec![0usize; ks.len()];
    for r in 0..replicas {
        let mut rng = crate::rng::stream(seed, crate::rng::Purpose::Field, r as u64);
        let mut state = solver.init(datum)?;
        solver.run_to(&mut state, t, &mut rng);
        if let Some((first, last)) = support_extent(&state, SUPPORT_THRESHOLD) {
            let reach = grid.center(first).abs().max(grid.center(last).abs());
            for (h, &k) in hits.iter_mut().zip(ks) {
                if reach > k {
                    *h += 1;
                }
            }
        }
    }
    Ok(SupportScan {
        t,
        replicas,
        ks: ks.to_vec(),
        exceedance: hits.iter().map(|&h| h as f64 / replicas as f64).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub times: Vec<f64>,
    /// Fraction of cells with `u_low ≤ u_high + 1e-9` at each time, one
    /// shared-noise run.
    pub ordered_fraction: Vec<f64>,
}

/// Runs two fields from `f_low ≤ f_high` with identical noise arrays and
/// reports the pathwise ordered fraction at each of `times`.
pub fn coupled_comparison_run(
    solver: &SpdeSolver,
    f_low: &InitialDatum,
    f_high: &InitialDatum,
    times: &[f64],
    rng: &mut SimRng,
) -> Result<ComparisonReport, SpdeError> {
    let mut low = solver.init(f_low)?;
    let mut high = solver.init(f_high)?;
    let n = low.values.len();
    let mut noise = vec![0.0; n];
    let mut fractions = Vec::with_capacity(times.len());
    for &t in times {
        let steps = ((t - low.time) / solver.config.dt).round().max(0.0) as usize;
        for _ in 0..steps {
            for z in noise.iter_mut() {
                *z = rng.sample(StandardNormal);
            }
            solver.em_step_with_noise(&mut low, &noise);
            solver.em_step_with_noise(&mut high, &noise);
        }
        let ordered = low.values.iter().zip(&high.values).filter(|(l, h)| **l <= **h + 1e-9).count();
        fractions.push(ordered as f64 / n as f64);
    }
    Ok(ComparisonReport { times: times.to_vec(), ordered_fraction: fractions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::{BranchingSpec, OracleMode};
    use crate::rng::{stream, Purpose};

    fn grid(lo: f64, hi: f64, dx: f64, boundary: Boundary) -> Grid {
        Grid::covering(lo, hi, dx, boundary)
    }

    fn solver(spec: BranchingSpec, oracle: OracleMode, g: Grid) -> SpdeSolver {
        SpdeSolver::new(Mechanism::new(spec, oracle).unwrap(), SpdeConfig::new(g)).unwrap()
    }

    #[test]
    fn init_examples() {
        let g = grid(-1.0, 2.0, 0.1, Boundary::DirichletZero);
        let zero = init_field(&g, &InitialDatum::Constant { value: 0.0 }, 1.0).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
        let ind = init_field(&g, &InitialDatum::ScaledIndicator { eps: 0.1, a: 0.0, b: 1.0 }, 1.0).unwrap();
        for (x, v) in g.centers().zip(&ind.values) {
            assert_eq!(*v, if x > 0.0 && x < 1.0 { 0.1 } else { 0.0 });
        }
        let top = init_field(&g, &InitialDatum::Constant { value: 1.5 }, 1.5).unwrap();
        assert!(top.values.iter().all(|&v| v == 1.5));
        assert!(matches!(
            init_field(&g, &InitialDatum::Constant { value: 1.6 }, 1.5),
            Err(SpdeError::OutOfRange { .. })
        ));
    }

    #[test]
    fn stability_enforced() {
        let g = grid(0.0, 1.0, 0.1, Boundary::DirichletZero);
        let mut cfg = SpdeConfig::new(g);
        cfg.dt = 0.006;
        assert!(matches!(cfg.validate(), Err(SpdeError::StabilityViolation { .. })));
        let tiny = Grid { n_cells: 4, ..g };
        assert!(SpdeConfig::new(tiny).validate().is_err());
    }

    #[test]
    fn zero_field_is_absorbing() {
        let s = solver(BranchingSpec::coalescing(1.0), OracleMode::OFF, grid(-1.0, 1.0, 0.05, Boundary::Periodic));
        let mut st = s.init(&InitialDatum::Constant { value: 0.0 }).unwrap();
        let mut rng = stream(1, Purpose::Field, 0);
        for _ in 0..200 {
            s.em_step(&mut st, &mut rng);
        }
        assert!(st.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn z_star_constant_is_fixed_under_periodic_boundary() {
        let q = crate::mechanisms::OffspringLaw::catalytic(vec![0.5, 0.0, 0.0, 0.5]);
        let spec = BranchingSpec::new(0.0, crate::mechanisms::OffspringLaw::ordinary(vec![1.0]), 1.0, q);
        for noise in [NoiseScheme::Gaussian, NoiseScheme::PoissonGamma] {
            let mut s = solver(spec.clone(), OracleMode::OFF, grid(0.0, 1.0, 0.05, Boundary::Periodic));
            s.config.noise = noise;
            let zs = s.mechanism.z_star();
            let mut st = s.init(&InitialDatum::Constant { value: zs }).unwrap();
            let mut rng = stream(1, Purpose::Field, 0);
            for _ in 0..200 {
                s.em_step(&mut st, &mut rng);
            }
            assert!(st.values.iter().all(|&v| (v - zs).abs() < 1e-9), "{noise:?}");
        }
    }

    #[test]
    fn deterministic_limit_matches_heat_kernel() {
        let g = grid(-3.0, 4.0, 0.02, Boundary::DirichletZero);
        let s = solver(BranchingSpec::coalescing(1.0), OracleMode::ALL, g);
        let f = InitialDatum::ScaledIndicator { eps: 0.5, a: 0.0, b: 1.0 };
        let mut st = s.init(&f).unwrap();
        s.run_to(&mut st, 0.1, &mut stream(1, Purpose::Field, 0));
        let xs = [-0.3, 0.0, 0.2, 0.5, 0.9, 1.3];
        let got = sample_at(&g, &st, &xs).unwrap();
        for (x, v) in xs.iter().zip(got) {
            let exact = f.heat_semigroup(0.1, *x);
            assert!((v - exact).abs() <= 0.02 * exact, "x={x}: {v} vs {exact}");
        }
    }

    #[test]
    fn sample_at_examples() {
        let g = grid(0.0, 1.0, 0.1, Boundary::DirichletZero);
        let st = FieldState { time: 0.0, values: (0..10).map(|i| i as f64).collect() };
        assert_eq!(sample_at(&g, &st, &[g.center(3)]).unwrap()[0], 3.0);
        let mid = 0.5 * (g.center(3) + g.center(4));
        assert!((sample_at(&g, &st, &[mid]).unwrap()[0] - 3.5).abs() < 1e-12);
        let flat = FieldState { time: 0.0, values: vec![0.7; 10] };
        assert!((sample_at(&g, &flat, &[0.33]).unwrap()[0] - 0.7).abs() < 1e-15);
        assert!(matches!(sample_at(&g, &st, &[0.01]), Err(SpdeError::OutOfGrid { .. })));
    }

    #[test]
    fn support_extent_examples() {
        let g = grid(-1.0, 2.0, 0.1, Boundary::DirichletZero);
        assert_eq!(support_extent(&FieldState { time: 0.0, values: vec![0.0; 30] }, SUPPORT_THRESHOLD), None);
        let st = init_field(&g, &InitialDatum::ScaledIndicator { eps: 0.1, a: 0.0, b: 1.0 }, 1.0).unwrap();
        let (a, b) = support_extent(&st, SUPPORT_THRESHOLD).unwrap();
        assert!(g.center(a) > 0.0 && g.center(b) < 1.0);
    }

    #[test]
    fn coupled_identical_data_are_identical() {
        let s = solver(BranchingSpec::coalescing(1.0), OracleMode::OFF, grid(-2.0, 3.0, 0.05, Boundary::DirichletZero));
        let f = InitialDatum::ScaledIndicator { eps: 0.1, a: 0.0, b: 1.0 };
        let rep = coupled_comparison_run(&s, &f, &f, &[0.05, 0.1], &mut stream(3, Purpose::Field, 0)).unwrap();
        assert_eq!(rep.ordered_fraction, vec![1.0, 1.0]);
        let zero = InitialDatum::Constant { value: 0.0 };
        let rep = coupled_comparison_run(&s, &zero, &f, &[0.05, 0.1], &mut stream(3, Purpose::Field, 0)).unwrap();
        assert_eq!(rep.ordered_fraction, vec![1.0, 1.0]);
    }

    #[test]
    fn poisson_gamma_moments() {
        let mut rng = stream(9, Purpose::Misc, 0);
        for (m, v) in [(0.01, 0.004), (0.3, 0.02), (1.0, 1e-7)] {
            let acc: Accumulator = (0..200_000).map(|_| poisson_gamma(m, v, &mut rng)).collect();
            assert!((acc.mean() - m).abs() < 4.0 * acc.se(), "mean {m}: {}", acc.mean());
            assert!((acc.variance() - v).abs() < 0.03 * v, "var {v}: {}", acc.variance());
        }
        assert_eq!(poisson_gamma(0.0, 1.0, &mut rng), 0.0);
    }
}
