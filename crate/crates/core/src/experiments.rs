//! Experiment drivers: local-time calibration, closed-form oracles,
//! martingale and supermartingale scans, embedded-chain absorption, blow-up
//! probes and the coming-down-from-infinity ratio scan.
//!
//! Every driver is deterministic given its seed and returns the statistic
//! together with its standard error.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{SimError, SpdeError};
use crate::local_time::{
    expected_pair_local_time_oracle, LocalTimeEstimator, LocalTimeEstimatorConfig,
};
use crate::mechanisms::{BranchingSpec, OffspringLaw, OracleMode};
use crate::mfe::{classify_integrability, integral_over, InitialTrace, Integrability, MfeConfig, MfeSolver};
use crate::particle::{
    embedded_chain_matrix, AdaptiveStepping, EventKind, MartingaleTracker, Population, SimConfig, Simulator,
};
use crate::rng::{stream, Purpose};
use crate::spde::{Boundary, Grid};
use crate::stats::{bm_interval_prob, Accumulator, MeanSe};
use crate::tabulated::TestFunction;

/// Pass/fail outcome of one check with the numbers behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub statistic: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub replicas: u64,
}

/// `n` points equally spaced in `(a, b)` at the cell midpoints.
pub fn equispaced(n: usize, a: f64, b: f64) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * (i as f64 + 0.5) / n as f64).collect()
}

// ---------------------------------------------------------------------------
// Mechanism algebra

/// Grid size for the pointwise inequality checks on `[0, z*]`.
pub const ALGEBRA_GRID_POINTS: usize = 1000;
/// `γ` values for the `κ(γ) → 1` check, decreasing.
pub const KAPPA_GAMMAS: [f64; 4] = [0.2, 0.1, 0.05, 0.01];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgebraReport {
    pub phi_at_zero: f64,
    pub psi_at_zero: f64,
    pub z_star: f64,
    pub psi_at_z_star: f64,
    /// First grid point violating `−λ_o z ≤ Φ'(0+) z ≤ Φ(z) ≤ β_o z` or
    /// `0 ≤ Ψ(z) ≤ 2β_c z`, if any.
    pub bound_violation: Option<f64>,
    pub kappa: Vec<f64>,
    /// Taylor lower bound on `κ(γ)`, tending to 1 with `γ`.
    pub kappa_floor: Vec<f64>,
    pub pass: bool,
}

/// Pointwise algebra of one valid spec: roots at 0 and z*, the elementary
/// bounds on Φ and Ψ, and `κ(γ) ∈ [0, 1]` non-decreasing as `γ` decreases
/// and above a lower bound that tends to 1.
pub fn mechanism_algebra_check(spec: &BranchingSpec) -> Result<AlgebraReport, crate::MechanismError> {
    use crate::mechanisms::{derived_constants, kappa, phi, psi};
    let c = derived_constants(spec);
    let z_star = c.z_star;
    let scale = 1e-12 * (1.0 + spec.beta_o + spec.beta_c);
    let bound_violation = (0..ALGEBRA_GRID_POINTS)
        .map(|i| z_star * i as f64 / (ALGEBRA_GRID_POINTS - 1) as f64)
        .find(|&z| {
            let (ph, ps) = (phi(spec, z), psi(spec, z));
            !(-c.lambda_o * z <= c.phi_prime0 * z + scale
                && c.phi_prime0 * z <= ph + scale
                && ph <= spec.beta_o * z + scale
                && ps >= -scale
                && ps <= 2.0 * spec.beta_c * z + scale)
        });
    let kappa = KAPPA_GAMMAS.iter().map(|&g| kappa(spec, g)).collect::<Result<Vec<_>, _>>()?;
    // Ψ'' is decreasing on [0, 1], so Ψ(w) ≤ Ψ'(0+)w + ½M w² with
    // M = Ψ''(0)⁺, giving κ(γ) ≥ 1/(1 + Mγ/(2Ψ'(0+))) → 1.
    let second: f64 = spec.q.probs.iter().enumerate().map(|(k, &q)| (k * k.saturating_sub(1)) as f64 * q).sum();
    let curvature = (spec.beta_c * (second - 2.0)).max(0.0);
    let kappa_floor: Vec<f64> =
        KAPPA_GAMMAS.iter().map(|&g| 1.0 / (1.0 + curvature * g / (2.0 * c.psi_prime0))).collect();
    let in_range = kappa.iter().all(|k| (0.0..=1.0).contains(k));
    let monotone = kappa.windows(2).all(|w| w[1] >= w[0] - 1e-12);
    let above_floor = kappa.iter().zip(&kappa_floor).all(|(k, f)| *k >= f - 1e-9);
    let (phi0, psi0, psi_z) = (phi(spec, 0.0), psi(spec, 0.0), psi(spec, z_star));
    let pass = phi0 == 0.0
        && psi0 == 0.0
        && psi_z.abs() <= 1e-10
        && bound_violation.is_none()
        && in_range
        && monotone
        && above_floor;
    Ok(AlgebraReport {
        phi_at_zero: phi0,
        psi_at_zero: psi0,
        z_star,
        psi_at_z_star: psi_z,
        bound_violation,
        kappa,
        kappa_floor,
        pass,
    })
}

/// A random spec satisfying every model assumption: `β_o ∈ [0, 2)`,
/// `β_c ∈ (0.1, 3)`, ordinary law on `{0, 2, 3, 4}`, catalytic law on
/// `{0, 1, 3, 4}` with odd mass and mean below 2.
pub fn random_valid_spec<R: Rng + ?Sized>(rng: &mut R) -> BranchingSpec {
    use crate::mechanisms::{validate, LawKind};
    loop {
        let mut weights = |support: &[usize]| -> Vec<(usize, f64)> {
            let w: Vec<f64> = support.iter().map(|_| rng.random::<f64>()).collect();
            let total: f64 = w.iter().sum();
            support.iter().zip(w).map(|(&k, x)| (k, x / total)).collect()
        };
        let p = weights(&[0, 2, 3, 4]);
        let q = weights(&[0, 1, 3, 4]);
        let spec = BranchingSpec::new(
            2.0 * rng.random::<f64>(),
            OffspringLaw::from_entries(LawKind::Ordinary, &p),
            0.1 + 2.9 * rng.random::<f64>(),
            OffspringLaw::from_entries(LawKind::Catalytic, &q),
        );
        if let Ok(spec) = validate(spec) {
            return spec;
        }
    }
}

// ---------------------------------------------------------------------------
// Local-time calibration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandLevel {
    pub epsilon: f64,
    pub dt: f64,
    pub mean: MeanSe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub t: f64,
    pub oracle: f64,
    /// Band estimates, coarsest first.
    pub band: Vec<BandLevel>,
    /// Linear-in-ε Richardson extrapolation of the two finest levels.
    pub extrapolated: f64,
    /// Successive differences shrink (or are within noise).
    pub trend_ok: bool,
    pub bridge: MeanSe,
    pub band_vs_oracle: f64,
    pub band_vs_bridge: f64,
    pub bridge_vs_oracle: f64,
}

impl CalibrationReport {
    /// Relative agreement within `tol` on all three comparisons, and a
    /// converging band sequence.
    pub fn pass(&self, tol: f64) -> bool {
        self.trend_ok && self.band_vs_oracle <= tol && self.band_vs_bridge <= tol && self.bridge_vs_oracle <= tol
    }
}

/// Accumulated local time over `[0, t]` of pairs of independent unit
/// Brownian motions started at a common point, with the band estimator at
/// each `ε` (step `ε²/4`) and the bridge estimator at step `bridge_dt`.
pub fn local_time_calibration(
    epsilons: &[f64],
    bridge_nodes: usize,
    bridge_dt: f64,
    t: f64,
    replicas: usize,
    seed: u64,
) -> Result<CalibrationReport, SimError> {
    let mut band = Vec::new();
    for (level, &eps) in epsilons.iter().enumerate() {
        let cfg = LocalTimeEstimatorConfig::band(eps);
        let est = LocalTimeEstimator::new(cfg)?;
        let dt = cfg.max_dt();
        let mean = pair_local_time(&est, dt, t, replicas, seed.wrapping_add(level as u64));
        band.push(BandLevel { epsilon: eps, dt, mean });
    }
    let est = LocalTimeEstimator::new(LocalTimeEstimatorConfig::bridge(bridge_nodes))?;
    let bridge = pair_local_time(&est, bridge_dt, t, replicas, seed.wrapping_add(1000));

    let oracle = expected_pair_local_time_oracle(t);
    let k = band.len();
    let extrapolated = if k >= 2 {
        let (c, f) = (&band[k - 2], &band[k - 1]);
        let ratio = c.epsilon / f.epsilon;
        (ratio * f.mean.mean - c.mean.mean) / (ratio - 1.0)
    } else {
        band[0].mean.mean
    };
    let trend_ok = band.windows(3).all(|w| {
        let d1 = (w[1].mean.mean - w[0].mean.mean).abs();
        let d2 = (w[2].mean.mean - w[1].mean.mean).abs();
        let noise = 3.0 * (w[2].mean.se.powi(2) + w[1].mean.se.powi(2)).sqrt();
        d2 <= d1 + noise
    });
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    Ok(CalibrationReport {
        t,
        oracle,
        extrapolated,
        trend_ok,
        bridge_vs_oracle: rel(bridge.mean, oracle),
        band_vs_oracle: rel(extrapolated, oracle),
        band_vs_bridge: rel(extrapolated, bridge.mean),
        band,
        bridge,
    })
}

fn pair_local_time(est: &LocalTimeEstimator, dt: f64, t: f64, replicas: usize, seed: u64) -> MeanSe {
    let steps = (t / dt).round() as usize;
    let sd = dt.sqrt();
    let mut acc = Accumulator::new();
    for r in 0..replicas {
        let mut rng = stream(seed, Purpose::Calibration, r as u64);
        let (mut x, mut y) = (0.0f64, 0.0f64);
        let mut total = 0.0;
        for _ in 0..steps {
            let d0 = x - y;
            x += sd * rng.sample::<f64, _>(StandardNormal);
            y += sd * rng.sample::<f64, _>(StandardNormal);
            total += est.increment(d0, x - y, dt);
        }
        acc.push(total);
    }
    acc.summary()
}

// ---------------------------------------------------------------------------
// Closed-form oracles

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub t: f64,
    pub mean: MeanSe,
    pub target: f64,
    pub pass: bool,
}

/// With both branching rates zeroed, `E Z_t(U) = Σᵢ P_{xᵢ}(B_t ∈ U)`.
pub fn free_motion_check(
    positions: &[f64],
    u: (f64, f64),
    times: &[f64],
    sim: &SimConfig,
    replicas: usize,
) -> Result<Vec<OracleComparison>, SimError> {
    let mut cfg = sim.clone();
    cfg.oracle_mode = OracleMode::ALL;
    let simulator = Simulator::from_spec(BranchingSpec::coalescing(1.0), cfg)?;
    let mut acc = vec![Accumulator::new(); times.len()];
    for r in 0..replicas {
        let mut rng = stream(sim.seed, Purpose::Particles, r as u64);
        let mut pop = Population::init(positions);
        for (k, &t) in times.iter().enumerate() {
            simulator.run_until(&mut pop, t, &mut rng)?;
            acc[k].push(pop.count_in(u.0, u.1) as f64);
        }
    }
    Ok(times
        .iter()
        .zip(acc)
        .map(|(&t, a)| {
            let target: f64 = positions.iter().map(|&x| bm_interval_prob(x, t, u.0, u.1)).sum();
            let mean = a.summary();
            OracleComparison { t, pass: mean.within(target, 3.0), mean, target }
        })
        .collect())
}

/// With the catalytic rate zeroed (pure branching Brownian motion),
/// `E Z_t(ℝ) = n e^{−Φ'(0+) t}`.
pub fn bbm_mean_check(
    spec: &BranchingSpec,
    positions: &[f64],
    times: &[f64],
    sim: &SimConfig,
    replicas: usize,
) -> Result<Vec<OracleComparison>, SimError> {
    let mut cfg = sim.clone();
    cfg.oracle_mode = OracleMode::NO_CATALYTIC;
    let simulator = Simulator::from_spec(spec.clone(), cfg)?;
    let phi_prime0 = simulator.constants().phi_prime0;
    let mut acc = vec![Accumulator::new(); times.len()];
    for r in 0..replicas {
        let mut rng = stream(sim.seed, Purpose::Particles, r as u64);
        let mut pop = Population::init(positions);
        for (k, &t) in times.iter().enumerate() {
            simulator.run_until(&mut pop, t, &mut rng)?;
            acc[k].push(pop.len() as f64);
        }
    }
    let n = positions.len() as f64;
    Ok(times
        .iter()
        .zip(acc)
        .map(|(&t, a)| {
            let target = n * (-phi_prime0 * t).exp();
            let mean = a.summary();
            OracleComparison { t, pass: mean.within(target, 3.0), mean, target }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Martingale and supermartingale scans

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingalePoint {
    pub t: f64,
    pub mean: MeanSe,
    pub deviation_in_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub z0: f64,
    pub points: Vec<MartingalePoint>,
    pub pass: bool,
}

/// Mean of `M_t^g` at each sampled time; passes when every mean is within
/// three standard errors of `Z_0(g)`.
pub fn martingale_scan(
    spec: &BranchingSpec,
    g: &TestFunction,
    positions: &[f64],
    times: &[f64],
    sim: &SimConfig,
    replicas: usize,
) -> Result<MartingaleReport, SimError> {
    let simulator = Simulator::from_spec(spec.clone(), sim.clone())?;
    let start = Population::init(positions);
    let z0 = start.integrate(&g.g)?;
    let mut acc = vec![Accumulator::new(); times.len()];
    for r in 0..replicas {
        let mut rng = stream(sim.seed, Purpose::Particles, r as u64);
        let mut pop = start.clone();
        let mut tracker = MartingaleTracker::start(g, simulator.constants(), &pop)?;
        for (k, &t) in times.iter().enumerate() {
            let steps = ((t - pop.time) / sim.dt).round().max(0.0) as usize;
            for _ in 0..steps {
                simulator.step(&mut pop, &mut rng)?;
                tracker.observe(&pop)?;
            }
            acc[k].push(tracker.value());
        }
    }
    let points: Vec<MartingalePoint> = times
        .iter()
        .zip(acc)
        .map(|(&t, a)| {
            let mean = a.summary();
            let dev = if mean.se > 0.0 { (mean.mean - z0) / mean.se } else { 0.0 };
            MartingalePoint { t, mean, deviation_in_se: dev }
        })
        .collect();
    let pass = points.iter().all(|p| p.mean.within(z0, 3.0));
    Ok(MartingaleReport { z0, points, pass })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupermartingalePoint {
    pub t: f64,
    /// Mean of `e^{Φ'(0+) t} Z_t(ℝ)`.
    pub discounted_mass: MeanSe,
    /// Mean of `∫ e^{Φ'(0+) s} d(Σ L)_s`.
    pub discounted_local_time: MeanSe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupermartingaleReport {
    pub n: usize,
    pub mass_bound: f64,
    pub local_time_bound: f64,
    pub points: Vec<SupermartingalePoint>,
    pub pass: bool,
}

/// Checks `E e^{Φ't} Z_t(ℝ) ≤ n` and `E ∫ e^{Φ's} dL ≤ 2n/Ψ'(0+)` within
/// three standard errors at each time.
pub fn supermartingale_scan(
    spec: &BranchingSpec,
    positions: &[f64],
    times: &[f64],
    sim: &SimConfig,
    replicas: usize,
) -> Result<SupermartingaleReport, SimError> {
    let simulator = Simulator::from_spec(spec.clone(), sim.clone())?;
    let c = *simulator.constants();
    let mut mass = vec![Accumulator::new(); times.len()];
    let mut lt = vec![Accumulator::new(); times.len()];
    for r in 0..replicas {
        let mut rng = stream(sim.seed, Purpose::Particles, r as u64);
        let mut pop = Population::init(positions);
        for (k, &t) in times.iter().enumerate() {
            simulator.run_until(&mut pop, t, &mut rng)?;
            mass[k].push((c.phi_prime0 * pop.time).exp() * pop.len() as f64);
            lt[k].push(pop.discounted_local_time);
        }
    }
    let n = positions.len();
    let mass_bound = n as f64;
    let local_time_bound = 2.0 * n as f64 / c.psi_prime0;
    let points: Vec<SupermartingalePoint> = times
        .iter()
        .zip(mass.into_iter().zip(lt))
        .map(|(&t, (m, l))| SupermartingalePoint {
            t,
            discounted_mass: m.summary(),
            discounted_local_time: l.summary(),
        })
        .collect();
    let pass = points.iter().all(|p| {
        p.discounted_mass.mean <= mass_bound + 3.0 * p.discounted_mass.se
            && p.discounted_local_time.mean <= local_time_bound + 3.0 * p.discounted_local_time.se
    });
    Ok(SupermartingaleReport { n, mass_bound, local_time_bound, points, pass })
}

// ---------------------------------------------------------------------------
// Embedded chain

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub replicas: usize,
    pub transitions: u64,
    /// `counts[i][j]`: pooled observed transitions `i → j`.
    pub counts: Vec<Vec<u64>>,
    pub chi_square: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub absorbed: usize,
    /// Distinct count sequences observed (first few), for deterministic laws.
    pub paths: Vec<Vec<usize>>,
}

impl ChainReport {
    pub fn all_absorbed(&self) -> bool {
        self.absorbed == self.replicas
    }
}

/// Minimum expected count for a transition cell to enter the statistic.
const CHI_SQUARE_MIN_EXPECTED: f64 = 5.0;

/// Runs `β_o = 0` replicas from `i0` particles at the origin until the
/// population is absorbed in `{0, 1}` (or `horizon`), recording the
/// population size at each applied catalytic event. Replicas are added until
/// at least `min_transitions` transitions are pooled (and at least
/// `min_replicas` replicas ran).
pub fn chain_absorption_test(
    q: &OffspringLaw,
    beta_c: f64,
    i0: usize,
    min_replicas: usize,
    min_transitions: u64,
    horizon: f64,
    sim: &SimConfig,
) -> Result<ChainReport, SimError> {
    let spec = BranchingSpec::new(0.0, OffspringLaw::ordinary(vec![1.0]), beta_c, q.clone()).with_parity_override();
    let mut cfg = sim.clone();
    cfg.record_events = true;
    cfg.horizon = horizon;
    if cfg.adaptive.is_none() {
        cfg.adaptive = Some(AdaptiveStepping { dt_max: horizon });
    }
    let simulator = Simulator::from_spec(spec, cfg.clone())?;
    let max_state = i0 + 64 * q.max_support().max(1);
    let mut counts = vec![vec![0u64; max_state + q.max_support() + 1]; max_state + 1];
    let mut transitions = 0u64;
    let mut absorbed = 0usize;
    let mut paths: Vec<Vec<usize>> = Vec::new();
    let mut replicas = 0usize;
    while replicas < min_replicas || transitions < min_transitions {
        let mut rng = stream(cfg.seed, Purpose::Particles, replicas as u64);
        let mut pop = Population::init(&vec![0.0; i0]);
        run_until_absorbed(&simulator, &mut pop, horizon, &mut rng)?;
        let mut path = vec![i0];
        for e in pop.event_log.iter().filter(|e| e.kind == EventKind::Catalytic && !e.discarded) {
            let before = *path.last().expect("non-empty");
            let after = e.population_after;
            if before < counts.len() && after < counts[before].len() {
                counts[before][after] += 1;
            }
            transitions += 1;
            path.push(after);
        }
        if pop.len() <= 1 {
            absorbed += 1;
        }
        if paths.len() < 16 && !paths.contains(&path) {
            paths.push(path);
        }
        replicas += 1;
    }

    let chain = embedded_chain_matrix(q, counts[0].len() - 1)?;
    let mut chi_square = 0.0;
    let mut dof = 0usize;
    for (i, row) in counts.iter().enumerate().skip(2) {
        let total: u64 = row.iter().sum();
        if total == 0 {
            continue;
        }
        let mut used = 0usize;
        let mut pooled_obs = 0.0;
        let mut pooled_exp = 0.0;
        for (j, &obs) in row.iter().enumerate() {
            let expected = total as f64 * chain.prob(i, j);
            if expected >= CHI_SQUARE_MIN_EXPECTED {
                chi_square += (obs as f64 - expected).powi(2) / expected;
                used += 1;
            } else {
                pooled_obs += obs as f64;
                pooled_exp += expected;
            }
        }
        if pooled_exp >= CHI_SQUARE_MIN_EXPECTED {
            chi_square += (pooled_obs - pooled_exp).powi(2) / pooled_exp;
            used += 1;
        }
        dof += used.saturating_sub(1);
    }
    let p_value = if dof == 0 {
        1.0
    } else {
        1.0 - ChiSquared::new(dof as f64).expect("positive dof").cdf(chi_square)
    };
    Ok(ChainReport {
        replicas,
        transitions,
        counts,
        chi_square,
        degrees_of_freedom: dof,
        p_value,
        absorbed,
        paths,
    })
}

/// Advances until `t_end` or until at most one particle remains.
fn run_until_absorbed(
    sim: &Simulator,
    pop: &mut Population,
    t_end: f64,
    rng: &mut crate::rng::SimRng,
) -> Result<(), SimError> {
    while pop.len() >= 2 && pop.time < t_end - 1e-12 {
        let dt = sim.next_dt(pop, t_end);
        sim.step_with(pop, dt, rng)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Blow-up probe

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupRow {
    pub truncation: usize,
    pub threshold: f64,
    pub exceedance: f64,
    pub mean_count: MeanSe,
}

/// Particles `per_site` to a site on the lattice `{0, 1, …, L−1}` for each
/// truncation `L`; reports `P(Z_t(U) > threshold)`.
pub fn blowup_probe(
    spec: &BranchingSpec,
    truncations: &[usize],
    per_site: usize,
    u: (f64, f64),
    thresholds: &[f64],
    t: f64,
    sim: &SimConfig,
    replicas: usize,
) -> Result<Vec<BlowupRow>, SimError> {
    let simulator = Simulator::from_spec(spec.clone(), sim.clone())?;
    let mut rows = Vec::new();
    for &len in truncations {
        let positions: Vec<f64> = (0..len).flat_map(|k| std::iter::repeat_n(k as f64, per_site)).collect();
        let mut counts = Vec::with_capacity(replicas);
        for r in 0..replicas {
            let mut rng = stream(sim.seed.wrapping_add(len as u64), Purpose::Particles, r as u64);
            let mut pop = Population::init(&positions);
            simulator.run_until(&mut pop, t, &mut rng)?;
            counts.push(pop.count_in(u.0, u.1) as f64);
        }
        let mean_count: MeanSe = counts.iter().copied().collect::<Accumulator>().summary();
        for &th in thresholds {
            let exceedance = counts.iter().filter(|&&c| c > th).count() as f64 / replicas as f64;
            rows.push(BlowupRow { truncation: len, threshold: th, exceedance, mean_count });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Coming down from infinity

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdiScanResult {
    /// Strictly decreasing.
    pub times: Vec<f64>,
    pub counts: Vec<MeanSe>,
    pub mfe_integrals: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Standard error of each ratio (from the count's).
    pub ratio_se: Vec<f64>,
}

impl CdiScanResult {
    pub fn within_band(&self, lo: f64, hi: f64) -> bool {
        self.ratios.iter().all(|&r| r >= lo && r <= hi)
    }

    /// `|ratio − 1|` does not increase as `t` decreases.
    pub fn deviation_non_increasing(&self) -> bool {
        self.ratios.windows(2).all(|w| (w[1] - 1.0).abs() <= (w[0] - 1.0).abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdiSetup {
    pub spec: BranchingSpec,
    /// Particle cluster: `n` points equally spaced in `region`.
    pub n: usize,
    pub region: (f64, f64),
    /// Counting window.
    pub window: (f64, f64),
    /// Decreasing sample times.
    pub times: Vec<f64>,
    pub sim: SimConfig,
    pub replicas: usize,
    /// Grid of the mean-field solve; must cover the region and window with
    /// room for the solution's spread (see [`CdiSetup::auto_grid`]).
    pub mfe_grid: Grid,
    pub mfe_t_floor: f64,
}

impl CdiSetup {
    /// Dirichlet grid of step `dx` covering the region and window plus
    /// `8√t_max + 1` on each side.
    pub fn auto_grid(region: (f64, f64), window: (f64, f64), t_max: f64, dx: f64) -> Grid {
        let margin = 8.0 * t_max.sqrt() + 1.0;
        Grid::covering(region.0.min(window.0) - margin, region.1.max(window.1) + margin, dx, Boundary::DirichletZero)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CdiError {
    #[error("counting window ({0}, {1}) meets the initial support in an unbounded set")]
    UnboundedWindow(f64, f64),
    #[error("sample times must be strictly decreasing and positive")]
    Times,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Mfe(#[from] SpdeError),
}

/// Monte Carlo mean of `Z_t(U)` against `∫_U v_t dx` for the trace
/// `(Λ = hull of the cluster, μ = 0)`.
pub fn cdi_ratio_scan(setup: &CdiSetup) -> Result<CdiScanResult, CdiError> {
    let trace = InitialTrace::interval(setup.region.0, setup.region.1);
    if classify_integrability(&trace, setup.window) == Integrability::Unbounded
        || !setup.window.0.is_finite()
        || !setup.window.1.is_finite()
    {
        return Err(CdiError::UnboundedWindow(setup.window.0, setup.window.1));
    }
    let times = &setup.times;
    if times.is_empty() || times.iter().any(|&t| t <= 0.0) || times.windows(2).any(|w| w[1] >= w[0]) {
        return Err(CdiError::Times);
    }

    // Mean-field side.
    let spec_mech = crate::mechanisms::Mechanism::new(setup.spec.clone(), OracleMode::OFF)
        .map_err(SimError::from)?;
    let psi_prime0 = spec_mech.constants.psi_prime0;
    let solver = MfeSolver::new(psi_prime0, MfeConfig::new(setup.mfe_grid, setup.mfe_t_floor))?;
    let sol = solver.solve(&trace, times)?;
    let mfe_integrals = times
        .iter()
        .map(|&t| {
            let snap = sol.at(t).expect("requested time");
            integral_over(&sol.grid, &snap.values, setup.window)
        })
        .collect::<Result<Vec<_>, _>>()?;

    // Particle side.
    let simulator = Simulator::from_spec(setup.spec.clone(), setup.sim.clone())?;
    let start = Population::init(&equispaced(setup.n, setup.region.0, setup.region.1));
    let mut acc = vec![Accumulator::new(); times.len()];
    for r in 0..setup.replicas {
        let mut rng = stream(setup.sim.seed, Purpose::Particles, r as u64);
        let mut pop = start.clone();
        for (k, &t) in times.iter().enumerate().rev() {
            simulator.run_until(&mut pop, t, &mut rng)?;
            acc[k].push(pop.count_in(setup.window.0, setup.window.1) as f64);
        }
    }
    let counts: Vec<MeanSe> = acc.iter().map(Accumulator::summary).collect();
    let ratios = counts.iter().zip(&mfe_integrals).map(|(c, i)| c.mean / i).collect();
    let ratio_se = counts.iter().zip(&mfe_integrals).map(|(c, i)| c.se / i).collect();
    Ok(CdiScanResult { times: times.clone(), counts, mfe_integrals, ratios, ratio_se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::LawKind;

    #[test]
    fn equispaced_points() {
        assert_eq!(equispaced(2, 0.0, 1.0), vec![0.25, 0.75]);
        assert!(equispaced(0, 0.0, 1.0).is_empty());
    }

    #[test]
    fn random_specs_satisfy_the_algebra() {
        let mut rng = stream(17, Purpose::Misc, 0);
        for _ in 0..20 {
            let spec = random_valid_spec(&mut rng);
            let rep = mechanism_algebra_check(&spec).unwrap();
            assert!(rep.pass, "{spec:?}: {rep:?}");
        }
    }

    #[test]
    fn coalescing_kappa_is_one() {
        let rep = mechanism_algebra_check(&BranchingSpec::coalescing(1.0)).unwrap();
        assert_eq!(rep.kappa, vec![1.0; 4]);
        assert!(rep.pass);
    }

    #[test]
    fn martingale_at_time_zero_is_exact() {
        let g = TestFunction::bump(0.0, 2.0, 4001, 3.0);
        let pos = [-0.2, 0.0, 0.3];
        let rep = martingale_scan(
            &BranchingSpec::coalescing(1.0),
            &g,
            &pos,
            &[0.0],
            &SimConfig::with_band(0.1, 0.1),
            10,
        )
        .unwrap();
        assert_eq!(rep.points[0].mean.mean, rep.z0);
        assert_eq!(rep.points[0].mean.se, 0.0);
        assert!(rep.pass);
    }

    #[test]
    fn supermartingale_at_time_zero_is_n() {
        let rep = supermartingale_scan(
            &BranchingSpec::coalescing(1.0),
            &[0.0, 0.1, 0.2],
            &[0.0],
            &SimConfig::with_band(0.1, 0.1),
            5,
        )
        .unwrap();
        assert_eq!(rep.points[0].discounted_mass.mean, 3.0);
        assert!(rep.pass);
    }

    #[test]
    fn deterministic_chain_paths() {
        let sim = SimConfig { seed: 4, ..SimConfig::with_band(0.1, 1.0) };
        let annihilating = OffspringLaw::catalytic(vec![1.0]);
        let rep = chain_absorption_test(&annihilating, 4.0, 4, 20, 0, 1e12, &sim).unwrap();
        assert!(rep.all_absorbed());
        assert_eq!(rep.paths, vec![vec![4, 2, 0]]);

        let coalescing = OffspringLaw::catalytic(vec![0.0, 1.0]);
        let rep = chain_absorption_test(&coalescing, 4.0, 3, 20, 0, 1e12, &sim).unwrap();
        assert!(rep.all_absorbed());
        assert_eq!(rep.paths, vec![vec![3, 2, 1]]);
    }

    #[test]
    fn cdi_rejects_unbounded_window() {
        let setup = CdiSetup {
            spec: BranchingSpec::coalescing(1.0),
            n: 10,
            region: (0.0, 1.0),
            window: (0.0, f64::INFINITY),
            times: vec![0.02, 0.01],
            sim: SimConfig::with_band(0.1, 0.02),
            replicas: 1,
            mfe_grid: CdiSetup::auto_grid((0.0, 1.0), (0.0, 1.0), 0.02, 0.01),
            mfe_t_floor: 1e-3,
        };
        assert!(matches!(cdi_ratio_scan(&setup), Err(CdiError::UnboundedWindow(..))));
        let bad_times = CdiSetup { window: (0.0, 1.0), times: vec![0.01, 0.02], ..setup };
        assert!(matches!(cdi_ratio_scan(&bad_times), Err(CdiError::Times)));
    }

    #[test]
    fn blowup_probe_bounded_control() {
        let spec = BranchingSpec::new(
            0.0,
            OffspringLaw::ordinary(vec![1.0]),
            1.0,
            OffspringLaw::from_entries(LawKind::Catalytic, &[(1, 1.0)]),
        );
        let rows = blowup_probe(&spec, &[10], 2, (0.5, 3.5), &[10.0], 0.05, &SimConfig::with_band(0.1, 0.05), 20)
            .unwrap();
        assert_eq!(rows[0].exceedance, 0.0);
    }
}
