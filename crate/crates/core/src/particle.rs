//! Time-stepped Monte Carlo engine for the self-catalytic branching
//! Brownian motion.
//!
//! One step of length `dt`:
//!
//! 1. every particle moves by an independent `N(0, dt)` increment;
//! 2. every particle rings its ordinary clock with probability
//!    `1 − exp(−β_o dt)`;
//! 3. every unordered pair rings its catalytic clock with probability
//!    `1 − exp(−(β_c/2) ΔL)`, `ΔL` the pair's local-time increment;
//! 4. the candidate events are applied in uniformly random order, and an
//!    event whose parents were already consumed is discarded as a conflict;
//! 5. the local-time accumulators are advanced.
//!
//! Children of an ordinary event sit at the parent's end-of-step position;
//! children of a catalytic event sit at the pair midpoint.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, SimError};
use crate::local_time::{LocalTimeEstimator, LocalTimeEstimatorConfig};
use crate::mechanisms::{DerivedConstants, Mechanism, OffspringLaw, OracleMode};
use crate::rng::SimRng;
use crate::tabulated::{Tabulated, TestFunction};

pub const DEFAULT_POPULATION_CAP: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub label: Label,
    pub position: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Ordinary,
    Catalytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub kind: EventKind,
    pub parent_labels: Vec<Label>,
    pub offspring_count: usize,
    pub location: f64,
    /// Label of the first child; children are numbered consecutively.
    pub first_child: Option<Label>,
    /// Population size right after the event was applied.
    pub population_after: usize,
    /// The event lost its parents to an earlier event in the same step.
    pub discarded: bool,
}

/// Local time accrued by one pair during the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairIncrement {
    pub midpoint: f64,
    pub amount: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub time: f64,
    pub particles: Vec<Particle>,
    /// `Σ_pairs L` accumulated so far.
    pub cumulative_local_time: f64,
    /// `∫ e^{Φ'(0+) s} d(Σ_pairs L)_s`.
    pub discounted_local_time: f64,
    pub event_log: Vec<EventRecord>,
    pub ordinary_events: u64,
    pub catalytic_events: u64,
    pub conflicts: u64,
    /// Per-pair increments of the most recent step.
    pub last_pair_increments: Vec<PairIncrement>,
    next_label: u64,
}

impl Population {
    /// Fresh population at time 0; repeated positions are allowed.
    pub fn init(positions: &[f64]) -> Self {
        let particles = positions
            .iter()
            .enumerate()
            .map(|(i, &x)| Particle { label: Label(i as u64), position: x })
            .collect();
        Self {
            time: 0.0,
            particles,
            cumulative_local_time: 0.0,
            discounted_local_time: 0.0,
            event_log: Vec::new(),
            ordinary_events: 0,
            catalytic_events: 0,
            conflicts: 0,
            last_pair_increments: Vec::new(),
            next_label: positions.len() as u64,
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = f64> + '_ {
        self.particles.iter().map(|p| p.position)
    }

    /// `Z_t(U)` for the open interval `U = (a, b)`.
    pub fn count_in(&self, a: f64, b: f64) -> usize {
        self.positions().filter(|&x| x > a && x < b).count()
    }

    /// `Z_t(g)`; errors if a particle lies outside the tabulation range.
    pub fn integrate(&self, g: &Tabulated) -> Result<f64, SimError> {
        self.positions()
            .map(|x| {
                g.eval(x).ok_or(SimError::GridRangeExceeded {
                    position: x,
                    min: g.x_min,
                    max: g.x_max(),
                })
            })
            .sum()
    }

    /// `Z_t(g)` with `g = 0` outside its tabulation range.
    pub fn integrate_truncated(&self, g: &Tabulated) -> f64 {
        self.positions().filter_map(|x| g.eval(x)).sum()
    }

    fn fresh_label(&mut self) -> Label {
        let l = Label(self.next_label);
        self.next_label += 1;
        l
    }
}

/// Step-size control for long absorption runs: when every pair is far
/// outside the interaction range the step grows with the squared gap, up to
/// `dt_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveStepping {
    pub dt_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub estimator: LocalTimeEstimatorConfig,
    pub population_cap: usize,
    pub seed: u64,
    pub oracle_mode: OracleMode,
    pub record_events: bool,
    pub adaptive: Option<AdaptiveStepping>,
}

impl Default for SimConfig {
    fn default() -> Self {
        let estimator = LocalTimeEstimatorConfig::band(0.05);
        Self {
            dt: estimator.max_dt(),
            horizon: 1.0,
            estimator,
            population_cap: DEFAULT_POPULATION_CAP,
            seed: 0,
            oracle_mode: OracleMode::OFF,
            record_events: false,
            adaptive: None,
        }
    }
}

impl SimConfig {
    /// Band estimator with half-width `eps` and the coupled step `eps²/4`.
    pub fn with_band(eps: f64, horizon: f64) -> Self {
        let estimator = LocalTimeEstimatorConfig::band(eps);
        Self { dt: estimator.max_dt(), horizon, estimator, ..Self::default() }
    }

    pub fn validate(&self, initial_count: usize) -> Result<(), ConfigError> {
        self.estimator.validate()?;
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(ConfigError::invalid("dt", format!("{} must be > 0", self.dt)));
        }
        let max_dt = self.estimator.max_dt();
        if self.dt > max_dt * (1.0 + 1e-12) {
            return Err(ConfigError::invalid(
                "dt",
                format!("{} exceeds eps^2/4 = {max_dt} for the band estimator", self.dt),
            ));
        }
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return Err(ConfigError::invalid("horizon", format!("{} must be >= 0", self.horizon)));
        }
        if self.population_cap < initial_count {
            return Err(ConfigError::invalid(
                "population_cap",
                format!("{} below initial count {initial_count}", self.population_cap),
            ));
        }
        if let Some(a) = self.adaptive {
            if !(a.dt_max >= self.dt) {
                return Err(ConfigError::invalid("dt_max", "must be >= dt"));
            }
        }
        Ok(())
    }
}

/// Everything a trajectory needs besides its state and random stream.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub mechanism: Mechanism,
    pub estimator: LocalTimeEstimator,
    pub config: SimConfig,
}

#[derive(Clone, Copy)]
enum Candidate {
    Ordinary(usize),
    Catalytic(usize, usize),
}

impl Simulator {
    pub fn new(mechanism: Mechanism, config: SimConfig) -> Result<Self, SimError> {
        config.validate(0)?;
        let estimator = LocalTimeEstimator::new(config.estimator)?;
        Ok(Self { mechanism, estimator, config })
    }

    /// Builds the mechanism from a raw spec, applying the config's oracle mode.
    pub fn from_spec(spec: crate::mechanisms::BranchingSpec, config: SimConfig) -> Result<Self, SimError> {
        let mechanism = Mechanism::new(spec, config.oracle_mode)?;
        Self::new(mechanism, config)
    }

    pub fn constants(&self) -> &DerivedConstants {
        &self.mechanism.constants
    }

    /// Advances one step of the configured `dt`.
    pub fn step(&self, pop: &mut Population, rng: &mut SimRng) -> Result<(), SimError> {
        self.step_with(pop, self.config.dt, rng)
    }

    /// Advances one step of length `dt`.
    pub fn step_with(&self, pop: &mut Population, dt: f64, rng: &mut SimRng) -> Result<(), SimError> {
        let t0 = pop.time;
        let n = pop.particles.len();
        pop.last_pair_increments.clear();

        let old: Vec<f64> = pop.positions().collect();
        let sd = dt.sqrt();
        for p in pop.particles.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            p.position += sd * z;
        }

        let mut candidates = Vec::new();
        let beta_o = self.mechanism.beta_o();
        if beta_o > 0.0 {
            let prob = -(-beta_o * dt).exp_m1();
            for i in 0..n {
                if rng.random::<f64>() < prob {
                    candidates.push(Candidate::Ordinary(i));
                }
            }
        }

        let mut total = 0.0;
        if n >= 2 {
            let half_beta_c = 0.5 * self.mechanism.beta_c();
            let new: Vec<f64> = pop.positions().collect();
            for (i, j) in self.interacting_pairs(&old, &new, dt) {
                let dl = self.estimator.increment(old[i] - old[j], new[i] - new[j], dt);
                if dl <= 0.0 {
                    continue;
                }
                total += dl;
                pop.last_pair_increments.push(PairIncrement { midpoint: 0.5 * (new[i] + new[j]), amount: dl });
                if half_beta_c > 0.0 {
                    let prob = -(-half_beta_c * dl).exp_m1();
                    if rng.random::<f64>() < prob {
                        candidates.push(Candidate::Catalytic(i, j));
                    }
                }
            }
        }

        let t1 = t0 + dt;
        if !candidates.is_empty() {
            self.apply_events(pop, candidates, t1, rng);
        }

        pop.cumulative_local_time += total;
        pop.discounted_local_time += (self.mechanism.constants.phi_prime0 * t0).exp() * total;
        pop.time = t1;

        if pop.particles.len() > self.config.population_cap {
            return Err(SimError::PopulationCapExceeded {
                cap: self.config.population_cap,
                count: pop.particles.len(),
                time: pop.time,
            });
        }
        Ok(())
    }

    /// Pairs `(i, j)`, `i < j`, in ascending order, that can accrue local
    /// time this step. For the band estimator these are exactly the pairs
    /// within `ε` at the start or at the end of the step; for the bridge
    /// estimator the end-of-step distance is pruned at a six-sigma range.
    fn interacting_pairs(&self, old: &[f64], new: &[f64], dt: f64) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        match self.config.estimator.method {
            crate::local_time::LocalTimeMethod::Band => {
                let eps = self.config.estimator.epsilon;
                close_pairs(old, eps, &mut pairs);
                close_pairs(new, eps, &mut pairs);
            }
            crate::local_time::LocalTimeMethod::Bridge => {
                close_pairs(new, self.estimator.interaction_range(dt), &mut pairs);
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }

    fn apply_events(&self, pop: &mut Population, mut candidates: Vec<Candidate>, time: f64, rng: &mut SimRng) {
        if candidates.len() > 1 {
            candidates.shuffle(rng);
        }
        let n = pop.particles.len();
        let mut alive = vec![true; n];
        let mut children: Vec<Particle> = Vec::new();
        let mut live_count = n;
        let record = self.config.record_events;
        for c in candidates {
            let (kind, parents, location) = match c {
                Candidate::Ordinary(i) => (EventKind::Ordinary, vec![i], pop.particles[i].position),
                Candidate::Catalytic(i, j) => {
                    let mid = 0.5 * (pop.particles[i].position + pop.particles[j].position);
                    (EventKind::Catalytic, vec![i, j], mid)
                }
            };
            let parent_labels = || parents.iter().map(|&k| pop.particles[k].label).collect::<Vec<_>>();
            if !parents.iter().all(|&k| alive[k]) {
                pop.conflicts += 1;
                if record {
                    pop.event_log.push(EventRecord {
                        time,
                        kind,
                        parent_labels: parent_labels(),
                        offspring_count: 0,
                        location,
                        first_child: None,
                        population_after: live_count + children.len(),
                        discarded: true,
                    });
                }
                continue;
            }
            let k = match kind {
                EventKind::Ordinary => {
                    pop.ordinary_events += 1;
                    self.mechanism.ordinary_sampler.sample(rng)
                }
                EventKind::Catalytic => {
                    pop.catalytic_events += 1;
                    self.mechanism.catalytic_sampler.sample(rng)
                }
            };
            let labels = parent_labels();
            for &p in &parents {
                alive[p] = false;
            }
            live_count -= parents.len();
            let first_child = (k > 0).then_some(Label(pop.next_label));
            for _ in 0..k {
                let label = pop.fresh_label();
                children.push(Particle { label, position: location });
            }
            if record {
                pop.event_log.push(EventRecord {
                    time,
                    kind,
                    parent_labels: labels,
                    offspring_count: k,
                    location,
                    first_child,
                    population_after: live_count + children.len(),
                    discarded: false,
                });
            }
        }
        let mut idx = 0;
        pop.particles.retain(|_| {
            let keep = alive[idx];
            idx += 1;
            keep
        });
        pop.particles.extend(children);
    }

    /// Step length for the next step: the configured `dt`, grown when the
    /// closest pair is far outside the interaction range, and never past `t_end`.
    pub fn next_dt(&self, pop: &Population, t_end: f64) -> f64 {
        let remaining = t_end - pop.time;
        let mut dt = self.config.dt;
        if let Some(a) = self.config.adaptive {
            let gap = min_gap(pop);
            let reach = match self.config.estimator.method {
                crate::local_time::LocalTimeMethod::Band => self.config.estimator.epsilon,
                crate::local_time::LocalTimeMethod::Bridge => 0.0,
            };
            // Keep the pair spread below an eighth of the free gap.
            let free = gap - reach;
            if free > 0.0 {
                let grown = (free / 8.0).powi(2) / 2.0;
                let cap = if self.mechanism.beta_o() > 0.0 {
                    a.dt_max.min(0.1 / self.mechanism.beta_o())
                } else {
                    a.dt_max
                };
                dt = dt.max(grown.min(cap));
            }
        }
        if remaining < dt * (1.0 + 1e-9) {
            remaining
        } else {
            dt
        }
    }

    /// Runs until `t_end` (adaptive steps land exactly on `t_end`).
    pub fn run_until(&self, pop: &mut Population, t_end: f64, rng: &mut SimRng) -> Result<(), SimError> {
        if self.config.adaptive.is_none() {
            let steps = ((t_end - pop.time) / self.config.dt).round().max(0.0) as usize;
            for _ in 0..steps {
                self.step(pop, rng)?;
            }
            return Ok(());
        }
        while pop.time < t_end - 1e-12 {
            let dt = self.next_dt(pop, t_end);
            self.step_with(pop, dt, rng)?;
        }
        Ok(())
    }

    /// Runs to the horizon, recording the requested observables at time 0
    /// and at each requested sample time.
    pub fn run(
        &self,
        mut pop: Population,
        observables: &Observables,
        rng: &mut SimRng,
    ) -> Result<RunOutput, SimError> {
        self.config.validate(pop.len())?;
        let mut times: Vec<f64> = observables
            .times
            .iter()
            .copied()
            .filter(|&t| t > 0.0 && t <= self.config.horizon + 1e-12)
            .collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let mut samples = Vec::new();
        observables.record(&pop, 0.0, &mut samples)?;
        for t in times {
            self.run_until(&mut pop, t, rng)?;
            observables.record(&pop, t, &mut samples)?;
        }
        self.run_until(&mut pop, self.config.horizon, rng)?;
        Ok(RunOutput { samples, final_population: pop })
    }
}

/// Appends every pair `(i, j)`, `i < j`, with `|xs[i] − xs[j]| ≤ range`.
fn close_pairs(xs: &[f64], range: f64, out: &mut Vec<(usize, usize)>) {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    for (a, &i) in order.iter().enumerate() {
        for &j in &order[a + 1..] {
            if xs[j] - xs[i] > range {
                break;
            }
            out.push((i.min(j), i.max(j)));
        }
    }
}

fn min_gap(pop: &Population) -> f64 {
    if pop.len() < 2 {
        return f64::INFINITY;
    }
    let mut xs: Vec<f64> = pop.positions().collect();
    xs.sort_by(f64::total_cmp);
    xs.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

/// What [`Simulator::run`] records.
#[derive(Debug, Clone, Default)]
pub struct Observables {
    pub times: Vec<f64>,
    /// Open windows `(a, b)` for `Z_t(U)`.
    pub windows: Vec<(f64, f64)>,
    /// Named tabulated test functions for `Z_t(g)`; zero outside their range.
    pub functions: Vec<(String, Tabulated)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableSample {
    pub time: f64,
    pub name: String,
    pub value: f64,
}

impl Observables {
    fn record(&self, pop: &Population, time: f64, out: &mut Vec<ObservableSample>) -> Result<(), SimError> {
        let mut push = |name: String, value: f64| out.push(ObservableSample { time, name, value });
        push("population".into(), pop.len() as f64);
        for &(a, b) in &self.windows {
            push(format!("Z({a},{b})"), pop.count_in(a, b) as f64);
        }
        for (name, g) in &self.functions {
            push(format!("Z[{name}]"), pop.integrate_truncated(g));
        }
        push("cumulative_local_time".into(), pop.cumulative_local_time);
        push("discounted_local_time".into(), pop.discounted_local_time);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub samples: Vec<ObservableSample>,
    pub final_population: Population,
}

/// Transition matrix of the population size observed at catalytic events.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedChain {
    pub truncation: usize,
    pub matrix: Vec<Vec<f64>>,
    /// Probability mass of row `i` that falls beyond the truncation level.
    pub lost_mass: Vec<f64>,
}

impl EmbeddedChain {
    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0.0)
    }
}

/// `P_{i,j} = 1{i ≥ 2, j ≥ i−2} q_{j+2−i} + 1{i = j = 1} + 1{i = j = 0}` on
/// `{0, …, K}`.
pub fn embedded_chain_matrix(q: &OffspringLaw, truncation: usize) -> Result<EmbeddedChain, SimError> {
    let k_max = truncation;
    let mut matrix = vec![vec![0.0; k_max + 1]; k_max + 1];
    let mut lost_mass = vec![0.0; k_max + 1];
    for i in 0..=k_max {
        if i < 2 {
            matrix[i][i] = 1.0;
            continue;
        }
        let mut kept = 0.0;
        for (k, &qk) in q.probs.iter().enumerate() {
            let j = i - 2 + k;
            if j <= k_max {
                matrix[i][j] += qk;
                kept += qk;
            }
        }
        lost_mass[i] = 1.0 - kept;
    }
    if k_max >= 2 && lost_mass[2] > 1e-9 || k_max < 2 && q.max_support() > k_max {
        return Err(SimError::TruncationLoss { k: k_max, row: 2, mass: 1.0 - lost_mass.get(2).copied().unwrap_or(1.0) });
    }
    Ok(EmbeddedChain { truncation: k_max, matrix, lost_mass })
}

/// Streaming evaluation of
/// `M_t^g = e^{Φ't} Z_t(g) − ½∫ e^{Φ's} Z_s(g'') ds + ½Ψ'(0+) ∫ e^{Φ's} Σ g(X) dL`.
///
/// The drift integral uses the trapezoid rule over observed states; the
/// local-time term pairs each step's increments with `g` at the pair midpoint.
#[derive(Debug, Clone)]
pub struct MartingaleTracker<'a> {
    g: &'a TestFunction,
    phi_prime0: f64,
    psi_prime0: f64,
    last_time: f64,
    last_drift: f64,
    drift_integral: f64,
    local_time_integral: f64,
    current_value: f64,
}

impl<'a> MartingaleTracker<'a> {
    pub fn start(g: &'a TestFunction, constants: &DerivedConstants, pop: &Population) -> Result<Self, SimError> {
        let zg = pop.integrate(&g.g)?;
        let drift = (constants.phi_prime0 * pop.time).exp() * pop.integrate(&g.g2)?;
        Ok(Self {
            g,
            phi_prime0: constants.phi_prime0,
            psi_prime0: constants.psi_prime0,
            last_time: pop.time,
            last_drift: drift,
            drift_integral: 0.0,
            local_time_integral: 0.0,
            current_value: (constants.phi_prime0 * pop.time).exp() * zg,
        })
    }

    /// Incorporates the step that just produced `pop`.
    pub fn observe(&mut self, pop: &Population) -> Result<f64, SimError> {
        let step_start = self.last_time;
        let discount_start = (self.phi_prime0 * step_start).exp();
        let mut lt = 0.0;
        for inc in &pop.last_pair_increments {
            let gv = self.g.g.eval(inc.midpoint).ok_or(SimError::GridRangeExceeded {
                position: inc.midpoint,
                min: self.g.g.x_min,
                max: self.g.g.x_max(),
            })?;
            lt += gv * inc.amount;
        }
        self.local_time_integral += discount_start * lt;

        let discount = (self.phi_prime0 * pop.time).exp();
        let drift = discount * pop.integrate(&self.g.g2)?;
        self.drift_integral += 0.5 * (pop.time - step_start) * (drift + self.last_drift);
        self.last_drift = drift;
        self.last_time = pop.time;

        self.current_value = discount * pop.integrate(&self.g.g)? - 0.5 * self.drift_integral
            + 0.5 * self.psi_prime0 * self.local_time_integral;
        Ok(self.current_value)
    }

    pub fn value(&self) -> f64 {
        self.current_value
    }
}

/// One recorded state of a trajectory: positions after a step and the
/// per-pair increments of that step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub time: f64,
    pub positions: Vec<f64>,
    pub pair_increments: Vec<PairIncrement>,
}

impl TrajectoryPoint {
    pub fn capture(pop: &Population) -> Self {
        Self {
            time: pop.time,
            positions: pop.positions().collect(),
            pair_increments: pop.last_pair_increments.clone(),
        }
    }
}

/// `M_t^g` along a recorded trajectory; the first point is the initial state.
pub fn martingale_functional(
    trajectory: &[TrajectoryPoint],
    g: &TestFunction,
    constants: &DerivedConstants,
) -> Result<Vec<(f64, f64)>, SimError> {
    let Some(first) = trajectory.first() else {
        return Ok(Vec::new());
    };
    let as_pop = |p: &TrajectoryPoint| {
        let mut pop = Population::init(&p.positions);
        pop.time = p.time;
        pop.last_pair_increments = p.pair_increments.clone();
        pop
    };
    let mut tracker = MartingaleTracker::start(g, constants, &as_pop(first))?;
    let mut out = vec![(first.time, tracker.value())];
    for p in &trajectory[1..] {
        out.push((p.time, tracker.observe(&as_pop(p))?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::{BranchingSpec, LawKind};
    use crate::rng::{stream, Purpose};

    fn sim(spec: BranchingSpec, cfg: SimConfig) -> Simulator {
        Simulator::from_spec(spec, cfg).unwrap()
    }

    #[test]
    fn init_examples() {
        let p = Population::init(&[]);
        assert!(p.is_empty());
        assert_eq!(p.count_in(f64::NEG_INFINITY, f64::INFINITY), 0);
        let p = Population::init(&[0.0, 1.0]);
        assert_eq!(p.len(), 2);
        let p = Population::init(&[0.5; 4]);
        assert_eq!(p.len(), 4);
        let mut labels: Vec<_> = p.particles.iter().map(|q| q.label).collect();
        labels.dedup();
        assert_eq!(labels.len(), 4);
        assert_eq!(p.cumulative_local_time, 0.0);
    }

    #[test]
    fn annihilating_pair_reaches_zero_or_stays() {
        let spec = BranchingSpec::new(
            0.0,
            OffspringLaw::ordinary(vec![1.0]),
            4.0,
            OffspringLaw::catalytic(vec![1.0]),
        )
        .with_parity_override();
        let mut cfg = SimConfig::with_band(0.1, 1.0);
        cfg.record_events = true;
        let s = sim(spec, cfg);
        for r in 0..50 {
            let mut rng = stream(11, Purpose::Particles, r);
            let mut pop = Population::init(&[0.0, 0.0]);
            let mut prev = 2;
            for _ in 0..400 {
                s.step(&mut pop, &mut rng).unwrap();
                assert!(pop.len() == 0 || pop.len() == 2);
                assert!(pop.len() <= prev);
                prev = pop.len();
            }
        }
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let spec = BranchingSpec::new(
            0.5,
            OffspringLaw::from_entries(LawKind::Ordinary, &[(0, 0.5), (2, 0.5)]),
            1.0,
            OffspringLaw::from_entries(LawKind::Catalytic, &[(0, 0.5), (3, 0.5)]),
        );
        let mut cfg = SimConfig::with_band(0.1, 0.5);
        cfg.record_events = true;
        let s = sim(spec, cfg);
        let obs = Observables { times: vec![0.1, 0.25], windows: vec![(0.0, 1.0)], functions: vec![] };
        let run = |seed| {
            let mut rng = stream(seed, Purpose::Particles, 0);
            s.run(Population::init(&[0.0, 0.1, 0.2, 0.3]), &obs, &mut rng).unwrap()
        };
        let (a, b) = (run(3), run(3));
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.final_population, b.final_population);
    }

    #[test]
    fn horizon_zero_records_initial_state_only() {
        let s = sim(BranchingSpec::coalescing(1.0), SimConfig::with_band(0.1, 0.0));
        let obs = Observables { times: vec![0.5], windows: vec![(-1.0, 1.0)], functions: vec![] };
        let out = s.run(Population::init(&[0.0, 0.5]), &obs, &mut stream(1, Purpose::Particles, 0)).unwrap();
        assert!(out.samples.iter().all(|x| x.time == 0.0));
        assert_eq!(out.final_population.time, 0.0);
    }

    #[test]
    fn population_observable_equals_list_length() {
        let s = sim(BranchingSpec::coalescing(2.0), SimConfig::with_band(0.1, 0.5));
        let obs = Observables { times: vec![0.1, 0.2, 0.3, 0.4, 0.5], windows: vec![(f64::NEG_INFINITY, f64::INFINITY)], functions: vec![] };
        let out = s.run(Population::init(&[0.0; 6]), &obs, &mut stream(5, Purpose::Particles, 0)).unwrap();
        for pair in out.samples.chunks(4) {
            assert_eq!(pair[0].value, pair[1].value);
        }
    }

    #[test]
    fn cap_is_an_error() {
        let spec = BranchingSpec::new(
            50.0,
            OffspringLaw::from_entries(LawKind::Ordinary, &[(3, 1.0)]),
            1.0,
            OffspringLaw::catalytic(vec![0.0, 1.0]),
        );
        let mut cfg = SimConfig::with_band(0.2, 1.0);
        cfg.population_cap = 30;
        let s = sim(spec, cfg);
        let mut pop = Population::init(&[0.0]);
        let err = s.run_until(&mut pop, 1.0, &mut stream(1, Purpose::Particles, 0)).unwrap_err();
        assert!(matches!(err, SimError::PopulationCapExceeded { cap: 30, .. }));
    }

    #[test]
    fn config_rejects_coarse_step() {
        let mut cfg = SimConfig::with_band(0.1, 1.0);
        cfg.dt = 0.01;
        assert!(cfg.validate(0).is_err());
        cfg.dt = -1.0;
        assert!(cfg.validate(0).is_err());
    }

    #[test]
    fn embedded_chain_examples() {
        let c = embedded_chain_matrix(&OffspringLaw::catalytic(vec![1.0]), 6).unwrap();
        assert_eq!(c.prob(0, 0), 1.0);
        assert_eq!(c.prob(1, 1), 1.0);
        for i in 2..=6 {
            assert_eq!(c.prob(i, i - 2), 1.0);
        }
        // 4 → 2 → 0
        let mut state = 4;
        for _ in 0..3 {
            state = (0..=6).find(|&j| c.prob(state, j) == 1.0).unwrap();
        }
        assert_eq!(state, 0);

        let c = embedded_chain_matrix(&OffspringLaw::catalytic(vec![0.0, 1.0]), 5).unwrap();
        for i in 2..=5 {
            assert_eq!(c.prob(i, i - 1), 1.0);
        }
        let q03 = OffspringLaw::catalytic(vec![0.5, 0.0, 0.0, 0.5]);
        assert!(embedded_chain_matrix(&q03, 2).is_err());
        let c = embedded_chain_matrix(&q03, 8).unwrap();
        assert_eq!(c.prob(4, 2), 0.5);
        assert_eq!(c.prob(4, 5), 0.5);
        assert_eq!(c.lost_mass[8], 0.5);
        assert_eq!(c.lost_mass[4], 0.0);
    }

    #[test]
    fn martingale_starts_at_z0() {
        let g = TestFunction::bump(0.0, 1.0, 2001, 5.0);
        let pop = Population::init(&[0.0, 0.3, -0.5]);
        let m = Mechanism::new(BranchingSpec::coalescing(1.0), OracleMode::OFF).unwrap();
        let tr = MartingaleTracker::start(&g, &m.constants, &pop).unwrap();
        assert!((tr.value() - pop.integrate(&g.g).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn martingale_with_flat_g_and_no_discount() {
        // g ≡ 1, g'' ≡ 0, Φ'(0+) = 0: M_t = Z_t(1) + ½Ψ'(0+) L_t.
        let g = TestFunction::constant_one(-50.0, 50.0);
        let s = sim(BranchingSpec::coalescing(2.0), SimConfig::with_band(0.1, 0.3));
        let mut pop = Population::init(&[0.0, 0.05, 0.1]);
        let mut rng = stream(2, Purpose::Particles, 0);
        let mut traj = vec![TrajectoryPoint::capture(&pop)];
        for _ in 0..100 {
            s.step(&mut pop, &mut rng).unwrap();
            traj.push(TrajectoryPoint::capture(&pop));
        }
        let m = martingale_functional(&traj, &g, s.constants()).unwrap();
        let (_, last) = *m.last().unwrap();
        let expected = pop.len() as f64 + 0.5 * s.constants().psi_prime0 * pop.cumulative_local_time;
        assert!((last - expected).abs() < 1e-9, "{last} vs {expected}");
    }

    #[test]
    fn adaptive_steps_stop_on_target() {
        let mut cfg = SimConfig::with_band(0.1, 10.0);
        cfg.adaptive = Some(AdaptiveStepping { dt_max: 1.0 });
        let s = sim(BranchingSpec::coalescing(1.0), cfg);
        let mut pop = Population::init(&[0.0, 50.0]);
        s.run_until(&mut pop, 3.0, &mut stream(1, Purpose::Particles, 0)).unwrap();
        assert!((pop.time - 3.0).abs() < 1e-12);
    }
}
