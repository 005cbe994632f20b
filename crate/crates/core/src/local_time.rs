//! Per-step estimators of the pairwise intersection local time
//! `L = lim_{ε→0} ε⁻¹ ∫ 1{|X^α − X^β| ≤ ε} ds`.
//!
//! The difference of two independent unit Brownian motions is a Brownian
//! motion with variance `2t`, whose occupation density at 0 (normalised
//! against Lebesgue measure) is half of `L`. Both estimators below return
//! increments in the `L` normalisation.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::ConfigError;
use crate::quadrature::GaussLegendre;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LocalTimeMethod {
    /// Trapezoidal ε-band indicator, the defining limit taken at fixed ε.
    #[default]
    Band,
    /// Expected occupation density of the Brownian bridge between the
    /// step endpoints.
    Bridge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalTimeEstimatorConfig {
    #[serde(default)]
    pub method: LocalTimeMethod,
    /// Band half-width.
    pub epsilon: f64,
    #[serde(default = "default_nodes")]
    pub quadrature_nodes: usize,
}

fn default_nodes() -> usize {
    16
}

impl Default for LocalTimeEstimatorConfig {
    fn default() -> Self {
        Self { method: LocalTimeMethod::Band, epsilon: 0.05, quadrature_nodes: default_nodes() }
    }
}

impl LocalTimeEstimatorConfig {
    pub fn band(epsilon: f64) -> Self {
        Self { method: LocalTimeMethod::Band, epsilon, ..Self::default() }
    }

    pub fn bridge(quadrature_nodes: usize) -> Self {
        Self { method: LocalTimeMethod::Bridge, quadrature_nodes, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(ConfigError::invalid("epsilon", format!("{} must be > 0", self.epsilon)));
        }
        if self.quadrature_nodes < 4 {
            return Err(ConfigError::invalid(
                "quadrature_nodes",
                format!("{} must be >= 4", self.quadrature_nodes),
            ));
        }
        Ok(())
    }

    /// Largest time step that resolves a band crossing over several steps.
    pub fn max_dt(&self) -> f64 {
        match self.method {
            LocalTimeMethod::Band => self.epsilon * self.epsilon / 4.0,
            LocalTimeMethod::Bridge => f64::INFINITY,
        }
    }
}

/// `(dt/ε)·½(1{|d0| ≤ ε} + 1{|d1| ≤ ε})`.
pub fn band_increment(d0: f64, d1: f64, dt: f64, eps: f64) -> f64 {
    let hits = (d0.abs() <= eps) as u8 + (d1.abs() <= eps) as u8;
    if hits == 0 {
        0.0
    } else {
        0.5 * hits as f64 * dt / eps
    }
}

/// `2 ∫₀^dt φ_s(0) ds`, where `φ_s` is the density of the variance-2 Brownian
/// bridge from `d0` to `d1` over `[0, dt]`.
///
/// With `s = dt(1 − cos θ)/2` the inverse-square-root endpoint singularities
/// cancel and the integral becomes
/// `√dt/(2√π) ∫₀^π exp(−m(θ)² / (dt sin²θ)) dθ`, which the rule integrates
/// with a smooth integrand.
pub fn bridge_increment(d0: f64, d1: f64, dt: f64, rule: &GaussLegendre) -> f64 {
    let occupation = rule.integrate(0.0, PI, |theta| {
        let (sin, cos) = theta.sin_cos();
        let m = d0 + (d1 - d0) * 0.5 * (1.0 - cos);
        let denom = dt * sin * sin;
        if denom <= 0.0 {
            return if m == 0.0 { 1.0 } else { 0.0 };
        }
        (-m * m / denom).exp()
    }) * dt.sqrt()
        / (2.0 * PI.sqrt());
    2.0 * occupation
}

/// `E L_t` for one pair of independent unit Brownian motions started at the
/// same point: `2 ∫₀^t (4πs)^{−1/2} ds`, evaluated by Gauss–Legendre after
/// the substitution `s = r²`.
pub fn expected_pair_local_time_oracle(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let rule = GaussLegendre::new(8);
    2.0 * rule.integrate(0.0, t.sqrt(), |r| {
        if r == 0.0 {
            1.0 / PI.sqrt()
        } else {
            2.0 * r / (4.0 * PI * r * r).sqrt()
        }
    })
}

/// A configured estimator, ready for repeated per-step use.
#[derive(Debug, Clone)]
pub struct LocalTimeEstimator {
    config: LocalTimeEstimatorConfig,
    rule: Option<GaussLegendre>,
}

impl LocalTimeEstimator {
    pub fn new(config: LocalTimeEstimatorConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let rule = match config.method {
            LocalTimeMethod::Band => None,
            LocalTimeMethod::Bridge => Some(GaussLegendre::new(config.quadrature_nodes)),
        };
        Ok(Self { config, rule })
    }

    pub fn config(&self) -> &LocalTimeEstimatorConfig {
        &self.config
    }

    pub fn increment(&self, d0: f64, d1: f64, dt: f64) -> f64 {
        match &self.rule {
            None => band_increment(d0, d1, dt, self.config.epsilon),
            Some(rule) => bridge_increment(d0, d1, dt, rule),
        }
    }

    /// Pairs whose end-of-step distance exceeds this contribute nothing
    /// (up to a six-sigma excursion of the pair difference).
    pub fn interaction_range(&self, dt: f64) -> f64 {
        let spread = 6.0 * (2.0 * dt).sqrt();
        match self.config.method {
            LocalTimeMethod::Band => self.config.epsilon + spread,
            LocalTimeMethod::Bridge => spread,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_examples() {
        assert_eq!(band_increment(10.0, 10.0, 0.01, 0.1), 0.0);
        assert!((band_increment(0.0, 0.0, 0.01, 0.1) - 0.1).abs() < 1e-15);
        assert!((band_increment(0.0, 1.0, 0.01, 0.5) - 0.01).abs() < 1e-15);
        assert!(band_increment(0.05, -0.02, 0.3, 0.1) <= 0.3 / 0.1);
    }

    #[test]
    fn bridge_far_pair_is_negligible() {
        let rule = GaussLegendre::new(16);
        let v = bridge_increment(10.0, 10.0, 0.01, &rule);
        assert!((0.0..1e-12).contains(&v));
    }

    #[test]
    fn bridge_pinned_at_zero_matches_closed_form() {
        // Bridge 0 → 0: ∫ ds / √(4π s(dt−s)/dt) = √(π dt)/2.
        let rule = GaussLegendre::new(16);
        let dt = 0.01;
        let v = bridge_increment(0.0, 0.0, dt, &rule);
        assert!((v - 2.0 * (PI * dt).sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn bridge_agrees_with_direct_quadrature() {
        // Independent route: integrate the bridge density in s directly,
        // removing the endpoint singularities with s = r² on the first half
        // and s = dt − r² on the second.
        let fine = GaussLegendre::new(10);
        let (d0, d1, dt) = (0.03, -0.05, 0.004);
        let density = |s: f64| {
            let m = d0 + (d1 - d0) * s / dt;
            let var = 2.0 * s * (dt - s) / dt;
            (-m * m / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
        };
        let half = (0.5 * dt).sqrt();
        let direct = fine.integrate_composite(0.0, half, 200, |r| 2.0 * r * density(r * r))
            + fine.integrate_composite(0.0, half, 200, |r| 2.0 * r * density(dt - r * r));
        let target = 2.0 * direct;
        let v = bridge_increment(d0, d1, dt, &GaussLegendre::new(96));
        assert!((v - target).abs() / target < 1e-9, "{v} vs {target}");
        // The integrand is flat to all orders at the ends, so the default
        // node count converges more slowly but stays well below MC noise.
        let v = bridge_increment(d0, d1, dt, &GaussLegendre::new(16));
        assert!((v - target).abs() / target < 1e-4, "{v} vs {target}");
    }

    #[test]
    fn oracle_matches_closed_form() {
        assert_eq!(expected_pair_local_time_oracle(0.0), 0.0);
        let mut prev = 0.0;
        for t in [0.01, 0.1, 0.5, 1.0, 4.0] {
            let v = expected_pair_local_time_oracle(t);
            assert!((v - 2.0 * (t / PI).sqrt()).abs() < 1e-12);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn config_validation() {
        assert!(LocalTimeEstimatorConfig::band(0.0).validate().is_err());
        assert!(LocalTimeEstimatorConfig::bridge(3).validate().is_err());
        assert!(LocalTimeEstimatorConfig::bridge(4).validate().is_ok());
        assert!((LocalTimeEstimatorConfig::band(0.2).max_dt() - 0.01).abs() < 1e-15);
    }
}
