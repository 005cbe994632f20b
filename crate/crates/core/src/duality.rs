//! Moment duality between the particle system and the SPDE:
//! `E_f[∏ᵢ (1 − u_t(xᵢ))] = E_x[∏_α (1 − f(X_t^α))]`.

use serde::{Deserialize, Serialize};

use crate::error::DualityError;
use crate::mechanisms::{BranchingSpec, LawKind, Mechanism, OffspringLaw, OracleMode};
use crate::particle::{Population, SimConfig, Simulator};
use crate::rng::{stream, Purpose};
use crate::spde::{sample_at, InitialDatum, SpdeConfig, SpdeSolver};
use crate::stats::{z_score, Accumulator, MeanSe};

/// Two-sided acceptance threshold on the z-score.
pub const Z_THRESHOLD: f64 = 3.0;

/// `∏(1 − zᵢ)` with the sign fixed by the number of factors above 1.
pub fn product_value(factors: &[f64]) -> f64 {
    let mut magnitude = 1.0;
    let mut negatives = 0usize;
    for &z in factors {
        let term = 1.0 - z;
        if term < 0.0 {
            negatives += 1;
        }
        magnitude *= term.abs();
    }
    if negatives % 2 == 1 {
        -magnitude
    } else {
        magnitude
    }
}

/// `0 ≤ 1 − ∏(1 − zᵢ) ≤ Σ zᵢ` for factors in `[0, 2]`.
pub fn product_inequality_check(factors: &[f64]) -> bool {
    let gap = 1.0 - product_value(factors);
    let sum: f64 = factors.iter().sum();
    let slack = 1e-12 * (1.0 + sum);
    gap >= -slack && gap <= sum + slack
}

/// What one side of the identity was estimated on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentKey {
    pub spec: BranchingSpec,
    pub f: InitialDatum,
    pub t: f64,
    pub points: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideEstimate {
    pub key: ExperimentKey,
    pub estimate: MeanSe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub t: f64,
    pub n: usize,
    pub lhs_mean: f64,
    pub lhs_se: f64,
    pub rhs_mean: f64,
    pub rhs_se: f64,
    pub z_score: f64,
    pub lhs_replicas: u64,
    pub rhs_replicas: u64,
    pub pass: bool,
}

/// Shared description of one duality experiment: the dual test function
/// `f`, the evaluation times (ascending) and the points `x₁…x_n`, which are
/// both the SPDE sampling points and the particles' starting positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityExperiment {
    pub spec: BranchingSpec,
    pub f: InitialDatum,
    pub times: Vec<f64>,
    pub points: Vec<f64>,
    pub replicas: usize,
    pub seed: u64,
}

/// `E ∏(1 − u_t(xᵢ))` at each time, from one SPDE run per replica.
pub fn lhs_estimate(
    exp: &DualityExperiment,
    spde: &SpdeConfig,
    oracle: OracleMode,
) -> Result<Vec<SideEstimate>, DualityError> {
    let mechanism = Mechanism::new(exp.spec.clone(), oracle).map_err(crate::SpdeError::from)?;
    let solver = SpdeSolver::new(mechanism, spde.clone())?;
    let mut acc = vec![Accumulator::new(); exp.times.len()];
    for r in 0..exp.replicas {
        let mut rng = stream(exp.seed, Purpose::Field, r as u64);
        let mut state = solver.init(&exp.f)?;
        for (k, &t) in exp.times.iter().enumerate() {
            solver.run_to(&mut state, t, &mut rng);
            let u = sample_at(solver.grid(), &state, &exp.points)?;
            acc[k].push(product_value(&u));
        }
    }
    Ok(package(exp, acc))
}

/// `E ∏_α (1 − f(X_t^α))` at each time, particles started at the points.
pub fn rhs_estimate(exp: &DualityExperiment, sim: &SimConfig) -> Result<Vec<SideEstimate>, DualityError> {
    let simulator = Simulator::from_spec(exp.spec.clone(), sim.clone())?;
    let mut acc = vec![Accumulator::new(); exp.times.len()];
    for r in 0..exp.replicas {
        let mut rng = stream(exp.seed, Purpose::Particles, r as u64);
        let mut pop = Population::init(&exp.points);
        for (k, &t) in exp.times.iter().enumerate() {
            simulator.run_until(&mut pop, t, &mut rng)?;
            let factors: Vec<f64> = pop.positions().map(|x| exp.f.eval(x)).collect();
            acc[k].push(product_value(&factors));
        }
    }
    Ok(package(exp, acc))
}

fn package(exp: &DualityExperiment, acc: Vec<Accumulator>) -> Vec<SideEstimate> {
    exp.times
        .iter()
        .zip(acc)
        .map(|(&t, a)| SideEstimate {
            key: ExperimentKey { spec: exp.spec.clone(), f: exp.f.clone(), t, points: exp.points.clone() },
            estimate: a.summary(),
        })
        .collect()
}

/// z-score of the two sides; both must describe the same experiment.
pub fn compare(lhs: &SideEstimate, rhs: &SideEstimate) -> Result<DualityReport, DualityError> {
    if lhs.key != rhs.key {
        return Err(DualityError::MismatchedExperiment(format!(
            "lhs at t={} with {} points vs rhs at t={} with {} points",
            lhs.key.t,
            lhs.key.points.len(),
            rhs.key.t,
            rhs.key.points.len()
        )));
    }
    let z = z_score(lhs.estimate, rhs.estimate);
    Ok(DualityReport {
        t: lhs.key.t,
        n: lhs.key.points.len(),
        lhs_mean: lhs.estimate.mean,
        lhs_se: lhs.estimate.se,
        rhs_mean: rhs.estimate.mean,
        rhs_se: rhs.estimate.se,
        z_score: z,
        lhs_replicas: lhs.estimate.n,
        rhs_replicas: rhs.estimate.n,
        pass: z.abs() <= Z_THRESHOLD,
    })
}

/// One cell of the reference matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub label: String,
    pub spec: BranchingSpec,
}

/// The 3 × 2 × 2 reference matrix: catalytic law ∈ {coalescing,
/// q₀ = q₁ = ½, q₀ = q₃ = ½} × β_c ∈ {0.5, 1} × ordinary part ∈ {none,
/// β_o = 0.5 with p₀ = p₂ = ½}.
pub fn duality_matrix() -> Vec<MatrixCell> {
    let laws = [
        ("q1", OffspringLaw::catalytic(vec![0.0, 1.0])),
        ("q0q1", OffspringLaw::catalytic(vec![0.5, 0.5])),
        ("q0q3", OffspringLaw::from_entries(LawKind::Catalytic, &[(0, 0.5), (3, 0.5)])),
    ];
    let ordinary = [
        ("bo0", 0.0, OffspringLaw::ordinary(vec![1.0])),
        ("bo0.5", 0.5, OffspringLaw::from_entries(LawKind::Ordinary, &[(0, 0.5), (2, 0.5)])),
    ];
    let mut cells = Vec::new();
    for (qname, q) in &laws {
        for beta_c in [0.5, 1.0] {
            for (oname, beta_o, p) in &ordinary {
                cells.push(MatrixCell {
                    label: format!("{qname}/bc{beta_c}/{oname}"),
                    spec: BranchingSpec::new(*beta_o, p.clone(), beta_c, q.clone()),
                });
            }
        }
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spde::{Boundary, Grid};
    use crate::stats::bm_interval_prob;

    #[test]
    fn product_examples() {
        assert_eq!(product_value(&[]), 1.0);
        assert_eq!(product_value(&[0.5, 0.5]), 0.25);
        assert_eq!(product_value(&[0.3, 1.0, 0.2]), 0.0);
        assert!((product_value(&[1.5]) + 0.5).abs() < 1e-15);
        assert!((product_value(&[1.5, 1.2]) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn inequality_examples() {
        assert!(product_inequality_check(&[0.0]));
        assert!(product_inequality_check(&[1.5]));
        assert!(product_inequality_check(&[2.0, 2.0, 0.3]));
    }

    #[test]
    fn matrix_is_valid() {
        let m = duality_matrix();
        assert_eq!(m.len(), 12);
        for c in &m {
            assert!(crate::mechanisms::validate(c.spec.clone()).is_ok(), "{}", c.label);
        }
    }

    fn experiment(spec: BranchingSpec, f: InitialDatum, times: &[f64], points: &[f64], replicas: usize) -> DualityExperiment {
        DualityExperiment { spec, f, times: times.to_vec(), points: points.to_vec(), replicas, seed: 1 }
    }

    fn small_spde() -> SpdeConfig {
        SpdeConfig::new(Grid::covering(-2.5, 3.5, 0.05, Boundary::DirichletZero))
    }

    #[test]
    fn zero_datum_gives_one() {
        let spec = BranchingSpec::coalescing(1.0);
        let f = InitialDatum::Constant { value: 0.0 };
        let exp = experiment(spec, f, &[0.05], &[0.5, 0.6], 20);
        let l = lhs_estimate(&exp, &small_spde(), OracleMode::OFF).unwrap();
        assert_eq!((l[0].estimate.mean, l[0].estimate.se), (1.0, 0.0));
        let r = rhs_estimate(&exp, &SimConfig::with_band(0.1, 0.05)).unwrap();
        assert_eq!(r[0].estimate.mean, 1.0);
    }

    #[test]
    fn time_zero_is_exact() {
        let spec = BranchingSpec::coalescing(1.0);
        let f = InitialDatum::ScaledIndicator { eps: 0.5, a: 0.0, b: 1.0 };
        let exp = experiment(spec, f, &[0.0], &[0.3, 0.5, 1.5], 5);
        let l = lhs_estimate(&exp, &small_spde(), OracleMode::OFF).unwrap();
        assert_eq!(l[0].estimate.mean, 0.25);
    }

    #[test]
    fn free_particles_match_error_function_target() {
        // β_o = β_c = 0: E ∏(1 − ½ P_{xᵢ}(B_t ∈ (0,1))).
        let spec = BranchingSpec::coalescing(1.0);
        let mut sim = SimConfig::with_band(0.1, 0.25);
        sim.oracle_mode = OracleMode::ALL;
        let f = InitialDatum::ScaledIndicator { eps: 0.5, a: 0.0, b: 1.0 };
        let exp = DualityExperiment { seed: 7, ..experiment(spec, f, &[0.25], &[0.0, 1.0], 4000) };
        let r = rhs_estimate(&exp, &sim).unwrap();
        let target: f64 = [0.0, 1.0].iter().map(|&x| 1.0 - 0.5 * bm_interval_prob(x, 0.25, 0.0, 1.0)).product();
        assert!(r[0].estimate.within(target, 3.0), "{:?} vs {target}", r[0].estimate);
    }

    #[test]
    fn mismatched_experiments_are_rejected() {
        let spec = BranchingSpec::coalescing(1.0);
        let f = InitialDatum::Constant { value: 0.0 };
        let a = SideEstimate {
            key: ExperimentKey { spec: spec.clone(), f: f.clone(), t: 0.1, points: vec![0.0] },
            estimate: MeanSe { mean: 1.0, se: 0.0, n: 1 },
        };
        let mut b = a.clone();
        b.key.t = 0.2;
        assert!(matches!(compare(&a, &b), Err(DualityError::MismatchedExperiment(_))));
        assert!(compare(&a, &a).unwrap().pass);
    }
}
