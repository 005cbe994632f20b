//! Offspring laws, the branching mechanisms Φ and Ψ, and the scalar
//! constants derived from them.
//!
//! Everything here is a pure function of an immutable [`BranchingSpec`].
//! Offspring laws have finite support, so every generating-function series
//! is a finite polynomial evaluated by Horner's rule.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::MechanismError;

/// Tolerance on `Σ p_k = 1`.
pub const PROB_SUM_TOL: f64 = 1e-12;
/// Absolute tolerance of the `z*` bisection.
pub const Z_STAR_TOL: f64 = 1e-12;
const Z_STAR_SCAN_POINTS: usize = 1000;
const KAPPA_GRID_POINTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawKind {
    Ordinary,
    Catalytic,
}

/// A probability law on `{0, 1, …, K}`; `probs[k]` is the chance of `k` children.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffspringLaw {
    pub probs: Vec<f64>,
    pub kind: LawKind,
}

impl OffspringLaw {
    pub fn ordinary(probs: impl Into<Vec<f64>>) -> Self {
        Self { probs: probs.into(), kind: LawKind::Ordinary }
    }

    pub fn catalytic(probs: impl Into<Vec<f64>>) -> Self {
        Self { probs: probs.into(), kind: LawKind::Catalytic }
    }

    /// Builds a law from sparse `(k, prob)` entries.
    pub fn from_entries(kind: LawKind, entries: &[(usize, f64)]) -> Self {
        let len = entries.iter().map(|&(k, _)| k + 1).max().unwrap_or(0);
        let mut probs = vec![0.0; len];
        for &(k, p) in entries {
            probs[k] += p;
        }
        Self { probs, kind }
    }

    pub fn prob(&self, k: usize) -> f64 {
        self.probs.get(k).copied().unwrap_or(0.0)
    }

    pub fn max_support(&self) -> usize {
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    pub fn mean(&self) -> f64 {
        self.probs.iter().enumerate().map(|(k, &p)| k as f64 * p).sum()
    }

    /// `Σ p_k s^k` by Horner's rule.
    pub fn generating_function(&self, s: f64) -> f64 {
        self.probs.iter().rev().fold(0.0, |acc, &p| acc * s + p)
    }

    /// `Σ_k p_k (s^k − 1)/(s − 1) = Σ_j P(K > j) s^j`, by Horner's rule on the
    /// tail probabilities. Lets the mechanisms factor out `z = 1 − s`, so
    /// they vanish exactly at `z = 0`.
    pub fn tail_generating_function(&self, s: f64) -> f64 {
        let mut tail = 0.0;
        let mut acc = 0.0;
        // Coefficient of s^j is P(K > j) = Σ_{k > j} p_k, j = K_max − 1 … 0.
        for &p in self.probs.iter().skip(1).rev() {
            tail += p;
            acc = acc * s + tail;
        }
        acc
    }

    /// The index that does not change the configuration: 1 for ordinary
    /// branching, 2 for catalytic branching.
    fn forbidden_index(&self) -> usize {
        match self.kind {
            LawKind::Ordinary => 1,
            LawKind::Catalytic => 2,
        }
    }

    pub fn has_odd_mass(&self) -> bool {
        self.probs.iter().enumerate().any(|(k, &p)| k % 2 == 1 && p > 0.0)
    }

    /// Inverse-CDF sampler for this law.
    pub fn sampler(&self) -> OffspringSampler {
        let mut acc = 0.0;
        let cdf = self
            .probs
            .iter()
            .map(|&p| {
                acc += p;
                acc
            })
            .collect();
        OffspringSampler { cdf }
    }
}

/// Cumulative table of an [`OffspringLaw`].
#[derive(Debug, Clone)]
pub struct OffspringSampler {
    cdf: Vec<f64>,
}

impl OffspringSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        // The last entry absorbs rounding in the cumulative sum.
        let last = self.cdf.len().saturating_sub(1);
        self.cdf.iter().position(|&c| u < c).unwrap_or(last)
    }
}

/// Rates and offspring laws of the particle system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchingSpec {
    /// Ordinary branching rate (per unit time).
    pub beta_o: f64,
    /// Catalytic branching rate parameter; pairs branch at rate `beta_c / 2`
    /// per unit of intersection local time.
    pub beta_c: f64,
    pub p: OffspringLaw,
    pub q: OffspringLaw,
    /// Accept a catalytic law with no odd-index mass.
    #[serde(default)]
    pub allow_parity_preserving: bool,
    /// Accept `beta_c = 0`. Outside the model's parameter range; used only to
    /// reduce the system to plain branching Brownian motion for regression.
    #[serde(default)]
    pub oracle_zero_catalytic: bool,
}

impl BranchingSpec {
    pub fn new(beta_o: f64, p: OffspringLaw, beta_c: f64, q: OffspringLaw) -> Self {
        Self {
            beta_o,
            beta_c,
            p,
            q,
            allow_parity_preserving: false,
            oracle_zero_catalytic: false,
        }
    }

    /// `β_o = 0`, `q_1 = 1`: pairs coalesce at rate `β_c / 2` per unit local time.
    pub fn coalescing(beta_c: f64) -> Self {
        Self::new(
            0.0,
            OffspringLaw::ordinary(vec![1.0]),
            beta_c,
            OffspringLaw::catalytic(vec![0.0, 1.0]),
        )
    }

    pub fn with_parity_override(mut self) -> Self {
        self.allow_parity_preserving = true;
        self
    }
}

/// One violated assumption, with the offending quantity.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NotAProbability { kind: LawKind, detail: String },
    SupercriticalCatalytic { mean: f64 },
    ParityPreserving,
    ForbiddenMass { kind: LawKind, index: usize, mass: f64 },
    NegativeRate { name: &'static str, value: f64 },
    ZeroCatalyticRate,
    WrongLawKind { expected: LawKind },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NotAProbability { kind, detail } => {
                write!(f, "NotAProbability: {kind:?} law {detail}")
            }
            Violation::SupercriticalCatalytic { mean } => write!(
                f,
                "SupercriticalCatalytic: sum k*q_k = {mean} must be < 2"
            ),
            Violation::ParityPreserving => write!(
                f,
                "ParityPreserving: catalytic law has no odd k with q_k > 0"
            ),
            Violation::ForbiddenMass { kind, index, mass } => {
                write!(f, "ForbiddenMass: {kind:?} law has mass {mass} at index {index}")
            }
            Violation::NegativeRate { name, value } => {
                write!(f, "NegativeRate: {name} = {value}")
            }
            Violation::ZeroCatalyticRate => {
                write!(f, "ZeroCatalyticRate: beta_c must be > 0 outside oracle mode")
            }
            Violation::WrongLawKind { expected } => {
                write!(f, "WrongLawKind: expected a {expected:?} law")
            }
        }
    }
}

fn check_law(law: &OffspringLaw, expected: LawKind, out: &mut Vec<Violation>) {
    if law.kind != expected {
        out.push(Violation::WrongLawKind { expected });
    }
    if law.probs.is_empty() {
        out.push(Violation::NotAProbability { kind: law.kind, detail: "is empty".into() });
        return;
    }
    if let Some((k, &p)) = law.probs.iter().enumerate().find(|(_, p)| !(p.is_finite() && **p >= 0.0)) {
        out.push(Violation::NotAProbability {
            kind: law.kind,
            detail: format!("has invalid entry {p} at index {k}"),
        });
        return;
    }
    let total: f64 = law.probs.iter().sum();
    if (total - 1.0).abs() > PROB_SUM_TOL {
        out.push(Violation::NotAProbability {
            kind: law.kind,
            detail: format!("sums to {total}"),
        });
    }
    let idx = law.forbidden_index();
    if law.prob(idx) != 0.0 {
        out.push(Violation::ForbiddenMass { kind: law.kind, index: idx, mass: law.prob(idx) });
    }
}

/// Returns every violated assumption of `spec`; empty when valid.
pub fn diagnose(spec: &BranchingSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    if !(spec.beta_o.is_finite() && spec.beta_o >= 0.0) {
        out.push(Violation::NegativeRate { name: "beta_o", value: spec.beta_o });
    }
    if !(spec.beta_c.is_finite() && spec.beta_c >= 0.0) {
        out.push(Violation::NegativeRate { name: "beta_c", value: spec.beta_c });
    } else if spec.beta_c == 0.0 && !spec.oracle_zero_catalytic {
        out.push(Violation::ZeroCatalyticRate);
    }
    check_law(&spec.p, LawKind::Ordinary, &mut out);
    check_law(&spec.q, LawKind::Catalytic, &mut out);
    let mean_q = spec.q.mean();
    if mean_q >= 2.0 {
        out.push(Violation::SupercriticalCatalytic { mean: mean_q });
    }
    if !spec.q.has_odd_mass() && !spec.allow_parity_preserving {
        out.push(Violation::ParityPreserving);
    }
    out
}

/// Checks every assumption and hands the spec back unchanged when it holds.
pub fn validate(spec: BranchingSpec) -> Result<BranchingSpec, MechanismError> {
    let violations = diagnose(&spec);
    if violations.is_empty() {
        Ok(spec)
    } else {
        Err(MechanismError::Invalid(violations))
    }
}

/// Ordinary branching mechanism `Φ(z) = β_o (Σ p_k (1−z)^k − (1−z))`,
/// evaluated as `β_o z (1 − T_p(1−z))` with the tail generating function
/// `T_p` (see [`OffspringLaw::tail_generating_function`]).
pub fn phi(spec: &BranchingSpec, z: f64) -> f64 {
    let s = 1.0 - z;
    spec.beta_o * z * (1.0 - spec.p.tail_generating_function(s))
}

/// Catalytic branching mechanism `Ψ(z) = β_c (Σ q_k (1−z)^k − (1−z)²)`,
/// evaluated as `β_c z (1 + (1−z) − T_q(1−z))`.
pub fn psi(spec: &BranchingSpec, z: f64) -> f64 {
    let s = 1.0 - z;
    spec.beta_c * z * (1.0 + s - spec.q.tail_generating_function(s))
}

/// Result of the `z*` search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZStar {
    pub value: f64,
    /// Set when `Ψ > 0` on `[1, 2)` and the value 2 is reported by convention.
    pub at_upper_edge: bool,
}

/// Smallest zero of Ψ on `[1, 2]`: coarse scan for the first sign change,
/// then bisection to [`Z_STAR_TOL`].
pub fn z_star(spec: &BranchingSpec) -> ZStar {
    let f = |z: f64| psi(spec, z);
    if f(1.0) <= 0.0 {
        return ZStar { value: 1.0, at_upper_edge: false };
    }
    let h = 1.0 / Z_STAR_SCAN_POINTS as f64;
    let mut lo = 1.0;
    let mut hi = None;
    for k in 1..Z_STAR_SCAN_POINTS {
        let z = 1.0 + k as f64 * h;
        if f(z) <= 0.0 {
            hi = Some(z);
            break;
        }
        lo = z;
    }
    // Without odd offspring numbers Ψ(2) = 0 is a root (typically of even
    // multiplicity), and bisecting towards it would only chase rounding noise.
    let mut hi = match hi {
        Some(hi) => hi,
        None if !spec.q.has_odd_mass() || f(2.0) > 0.0 => {
            return ZStar { value: 2.0, at_upper_edge: true };
        }
        None => 2.0,
    };
    while hi - lo > Z_STAR_TOL {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Either end of the final bracket is within tolerance of the root; keep
    // the one where Ψ is closer to zero.
    let value = if f(lo).abs() < f(hi).abs() { lo } else { hi };
    ZStar { value, at_upper_edge: false }
}

/// `θ(γ) = −log(1−γ)/γ`, continuously extended by `θ(0) = 1`.
pub fn theta(gamma: f64) -> Result<f64, MechanismError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(MechanismError::OutOfDomain { name: "gamma", value: gamma });
    }
    if gamma == 0.0 {
        Ok(1.0)
    } else {
        Ok(-(-gamma).ln_1p() / gamma)
    }
}

/// `κ(γ) = inf_{w ∈ (0, γ]} Ψ'(0+) w / Ψ(w)`, with value 1 in the `w → 0` limit.
///
/// Dense grid scan followed by golden-section refinement around the grid
/// minimiser.
pub fn kappa(spec: &BranchingSpec, gamma: f64) -> Result<f64, MechanismError> {
    kappa_with_grid(spec, gamma, KAPPA_GRID_POINTS)
}

pub fn kappa_with_grid(
    spec: &BranchingSpec,
    gamma: f64,
    grid_points: usize,
) -> Result<f64, MechanismError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(MechanismError::OutOfDomain { name: "gamma", value: gamma });
    }
    if gamma == 0.0 {
        return Ok(1.0);
    }
    let slope = psi_prime0(spec);
    let ratio = |w: f64| -> Result<f64, MechanismError> {
        let ps = psi(spec, w);
        if ps <= 0.0 {
            return Err(MechanismError::DivisionByZero { at: w });
        }
        Ok(slope * w / ps)
    };
    let n = grid_points.max(2);
    let h = gamma / n as f64;
    let mut best = (1.0, 0.0_f64);
    for k in 1..=n {
        let w = k as f64 * h;
        let r = ratio(w)?;
        if r < best.0 {
            best = (r, w);
        }
    }
    if best.1 > 0.0 {
        // Golden-section on the bracketing grid cell pair.
        let mut a = (best.1 - h).max(h * 1e-3);
        let mut b = (best.1 + h).min(gamma);
        let g = 0.5 * (5.0_f64.sqrt() - 1.0);
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let (mut fc, mut fd) = (ratio(c)?, ratio(d)?);
        for _ in 0..80 {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = ratio(c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = ratio(d)?;
            }
        }
        best.0 = best.0.min(fc).min(fd).min(ratio(gamma)?);
    }
    Ok(best.0.clamp(0.0, 1.0))
}

pub fn psi_prime0(spec: &BranchingSpec) -> f64 {
    spec.beta_c * (2.0 - spec.q.mean())
}

/// Scalar constants consumed throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub lambda_o: f64,
    pub lambda_c: f64,
    /// `Φ'(0+) = β_o − λ_o`; negative for supercritical ordinary branching.
    pub phi_prime0: f64,
    /// `Ψ'(0+) = β_c (2 − Σ k q_k)`.
    pub psi_prime0: f64,
    pub z_star: f64,
    pub z_star_at_upper_edge: bool,
}

pub fn derived_constants(spec: &BranchingSpec) -> DerivedConstants {
    let lambda_o = spec.beta_o * spec.p.mean();
    let lambda_c = spec.beta_c * spec.q.mean();
    let zs = z_star(spec);
    DerivedConstants {
        lambda_o,
        lambda_c,
        phi_prime0: spec.beta_o - lambda_o,
        psi_prime0: psi_prime0(spec),
        z_star: zs.value,
        z_star_at_upper_edge: zs.at_upper_edge,
    }
}

/// Switches that zero a branching rate for oracle regression runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleMode {
    #[serde(default)]
    pub zero_ordinary: bool,
    #[serde(default)]
    pub zero_catalytic: bool,
}

impl OracleMode {
    pub const OFF: OracleMode = OracleMode { zero_ordinary: false, zero_catalytic: false };
    pub const ALL: OracleMode = OracleMode { zero_ordinary: true, zero_catalytic: true };
    pub const NO_CATALYTIC: OracleMode = OracleMode { zero_ordinary: false, zero_catalytic: true };
}

/// A validated spec with oracle overrides applied, plus the samplers and
/// constants the simulators need.
///
/// `z_star` always comes from the un-overridden spec: zeroing Ψ leaves the
/// state space of the dual field unchanged.
#[derive(Debug, Clone)]
pub struct Mechanism {
    pub spec: BranchingSpec,
    pub oracle: OracleMode,
    pub constants: DerivedConstants,
    pub ordinary_sampler: OffspringSampler,
    pub catalytic_sampler: OffspringSampler,
}

impl Mechanism {
    pub fn new(spec: BranchingSpec, oracle: OracleMode) -> Result<Self, MechanismError> {
        let spec = validate(spec)?;
        let z = z_star(&spec);
        let mut effective = spec.clone();
        if oracle.zero_ordinary {
            effective.beta_o = 0.0;
        }
        if oracle.zero_catalytic {
            effective.beta_c = 0.0;
        }
        let mut constants = derived_constants(&effective);
        constants.z_star = z.value;
        constants.z_star_at_upper_edge = z.at_upper_edge;
        Ok(Self {
            ordinary_sampler: effective.p.sampler(),
            catalytic_sampler: effective.q.sampler(),
            spec: effective,
            oracle,
            constants,
        })
    }

    pub fn beta_o(&self) -> f64 {
        self.spec.beta_o
    }

    pub fn beta_c(&self) -> f64 {
        self.spec.beta_c
    }

    pub fn phi(&self, z: f64) -> f64 {
        phi(&self.spec, z)
    }

    pub fn psi(&self, z: f64) -> f64 {
        psi(&self.spec, z)
    }

    pub fn z_star(&self) -> f64 {
        self.constants.z_star
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn binary_p() -> OffspringLaw {
        OffspringLaw::from_entries(LawKind::Ordinary, &[(0, 0.5), (2, 0.5)])
    }

    fn q03() -> OffspringLaw {
        OffspringLaw::from_entries(LawKind::Catalytic, &[(0, 0.5), (3, 0.5)])
    }

    fn q01() -> OffspringLaw {
        OffspringLaw::from_entries(LawKind::Catalytic, &[(0, 0.5), (1, 0.5)])
    }

    #[test]
    fn validate_accepts_reference_spec() {
        let spec = BranchingSpec::new(1.0, binary_p(), 1.0, OffspringLaw::catalytic(vec![0.0, 1.0]));
        let checked = validate(spec.clone()).unwrap();
        assert_eq!(checked, spec);
        assert_eq!(validate(checked.clone()).unwrap(), checked);
    }

    #[test]
    fn validate_rejects_supercritical_catalytic() {
        let q = OffspringLaw::from_entries(LawKind::Catalytic, &[(4, 1.0)]);
        let spec = BranchingSpec::new(0.0, OffspringLaw::ordinary(vec![1.0]), 1.0, q);
        let v = diagnose(&spec);
        assert!(v.iter().any(|v| matches!(v, Violation::SupercriticalCatalytic { mean } if *mean == 4.0)));
    }

    #[test]
    fn annihilating_law_is_parity_preserving() {
        let spec = BranchingSpec::new(
            0.0,
            OffspringLaw::ordinary(vec![1.0]),
            1.0,
            OffspringLaw::catalytic(vec![1.0]),
        );
        assert_eq!(diagnose(&spec), vec![Violation::ParityPreserving]);
        assert!(validate(spec.with_parity_override()).is_ok());
    }

    #[test]
    fn forbidden_mass_and_bad_sums() {
        let spec = BranchingSpec::new(
            1.0,
            OffspringLaw::ordinary(vec![0.5, 0.5]),
            1.0,
            OffspringLaw::catalytic(vec![0.5, 0.25, 0.25]),
        );
        let v = diagnose(&spec);
        assert!(v.contains(&Violation::ForbiddenMass { kind: LawKind::Ordinary, index: 1, mass: 0.5 }));
        assert!(v.contains(&Violation::ForbiddenMass { kind: LawKind::Catalytic, index: 2, mass: 0.25 }));

        let bad = BranchingSpec::new(1.0, OffspringLaw::ordinary(vec![0.3, 0.0, 0.3]), 1.0, q03());
        assert!(matches!(diagnose(&bad)[0], Violation::NotAProbability { .. }));
    }

    #[test]
    fn zero_catalytic_rate_needs_oracle_flag() {
        let mut spec = BranchingSpec::coalescing(0.0);
        assert_eq!(diagnose(&spec), vec![Violation::ZeroCatalyticRate]);
        spec.oracle_zero_catalytic = true;
        assert!(diagnose(&spec).is_empty());
    }

    #[test]
    fn phi_examples() {
        let spec = BranchingSpec::new(1.0, OffspringLaw::ordinary(vec![1.0]), 1.0, q03());
        assert!(close(phi(&spec, 0.3), 0.3, 1e-15));
        assert_eq!(phi(&spec, 0.0), 0.0);
        let idle = BranchingSpec::new(0.0, binary_p(), 1.0, q03());
        for z in [0.0, 0.5, 1.7] {
            assert_eq!(phi(&idle, z), 0.0);
        }
    }

    #[test]
    fn factored_form_matches_generating_function() {
        let spec = BranchingSpec::new(0.7, binary_p(), 1.3, q03());
        for i in 0..=40 {
            let z = i as f64 * 0.05;
            let s = 1.0 - z;
            let direct_phi = 0.7 * (spec.p.generating_function(s) - s);
            let direct_psi = 1.3 * (spec.q.generating_function(s) - s * s);
            assert!(close(phi(&spec, z), direct_phi, 1e-14), "z={z}");
            assert!(close(psi(&spec, z), direct_psi, 1e-14), "z={z}");
        }
        assert_eq!((phi(&spec, 0.0), psi(&spec, 0.0)), (0.0, 0.0));
    }

    #[test]
    fn psi_examples() {
        let spec = BranchingSpec::coalescing(1.0);
        assert!(close(psi(&spec, 0.5), 0.25, 1e-15));
        assert_eq!(psi(&spec, 0.0), 0.0);
        let spec = BranchingSpec::new(0.0, OffspringLaw::ordinary(vec![1.0]), 1.0, q03());
        let zs = z_star(&spec).value;
        for k in 0..=200 {
            let z = zs * k as f64 / 200.0;
            assert!(psi(&spec, z) >= -1e-10, "psi({z}) negative");
        }
    }

    #[test]
    fn z_star_examples() {
        let zs = z_star(&BranchingSpec::coalescing(1.0));
        assert_eq!(zs.value, 1.0);
        assert!(!zs.at_upper_edge);

        let spec = BranchingSpec::new(0.0, OffspringLaw::ordinary(vec![1.0]), 1.0, q01());
        assert!(close(z_star(&spec).value, 1.5, 1e-11));

        // Ψ(z) = z(1 + z − z²)/2 has its root on [1,2] at the golden ratio.
        let spec = BranchingSpec::new(0.0, OffspringLaw::ordinary(vec![1.0]), 1.0, q03());
        let zs = z_star(&spec).value;
        assert!(psi(&spec, zs).abs() <= 1e-10);
        assert!(close(zs, 0.5 * (1.0 + 5.0_f64.sqrt()), 1e-11));
    }

    #[test]
    fn z_star_parity_preserving_edge() {
        let spec = BranchingSpec::new(
            0.0,
            OffspringLaw::ordinary(vec![1.0]),
            1.0,
            OffspringLaw::catalytic(vec![0.5, 0.0, 0.0, 0.0, 0.5]),
        )
        .with_parity_override();
        let zs = z_star(&spec);
        assert_eq!(zs.value, 2.0);
        assert!(zs.at_upper_edge);
    }

    #[test]
    fn theta_examples() {
        assert_eq!(theta(0.0).unwrap(), 1.0);
        assert!(close(theta(0.5).unwrap(), 2.0 * 2.0_f64.ln(), 1e-15));
        let mut prev = 1.0;
        for k in 1..100 {
            let t = theta(k as f64 / 100.0).unwrap();
            assert!(t >= 1.0 && t > prev);
            prev = t;
        }
        assert!(theta(1.0).is_err());
        assert!(theta(-0.1).is_err());
    }

    #[test]
    fn kappa_examples() {
        let coal = BranchingSpec::coalescing(1.0);
        for g in [0.1, 0.5, 0.9] {
            assert_eq!(kappa(&coal, g).unwrap(), 1.0);
        }
        // Ratio is 1/(1 + w − w²), decreasing on (0, ½].
        let spec = BranchingSpec::new(0.0, OffspringLaw::ordinary(vec![1.0]), 1.0, q03());
        let k = kappa(&spec, 0.5).unwrap();
        assert!(close(k, 0.8, 1e-9), "{k}");
        let fine = kappa_with_grid(&spec, 0.5, 100_000).unwrap();
        assert!(close(k, fine, 1e-6));
        assert!(kappa(&spec, 1.0).is_err());
    }

    #[test]
    fn derived_constant_examples() {
        let spec = BranchingSpec::new(0.0, binary_p(), 1.0, OffspringLaw::catalytic(vec![0.0, 1.0]));
        let c = derived_constants(&spec);
        assert_eq!(c.lambda_o, 0.0);
        assert_eq!(c.phi_prime0, 0.0);
        assert_eq!(c.psi_prime0, 1.0);
        assert_eq!(c.lambda_c, 1.0);

        let spec = BranchingSpec::new(2.0, OffspringLaw::ordinary(vec![1.0]), 1.0, q03());
        let c = derived_constants(&spec);
        assert_eq!(c.lambda_o, 0.0);
        assert_eq!(c.phi_prime0, 2.0);
        assert_eq!(c.psi_prime0, 0.5);
    }

    #[test]
    fn sampler_respects_support() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let s = q03().sampler();
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[s.sample(&mut rng)] += 1;
        }
        assert_eq!(counts[1] + counts[2], 0);
        assert!((counts[0] as f64 / 10_000.0 - 0.5).abs() < 0.03);
    }
}
