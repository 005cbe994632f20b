//! Replica statistics and closed-form Brownian quantities.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample variance (`n − 1` denominator); 0 below two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    pub fn summary(&self) -> MeanSe {
        MeanSe { mean: self.mean(), se: self.se(), n: self.n }
    }
}

impl FromIterator<f64> for Accumulator {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Accumulator::new();
        for x in iter {
            acc.push(x);
        }
        acc
    }
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: u64,
}

impl MeanSe {
    /// `|mean − target| ≤ k·se`, with a floating-point allowance for `se = 0`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se + 1e-12 * (1.0 + target.abs())
    }
}

pub fn z_score(a: MeanSe, b: MeanSe) -> f64 {
    let s = (a.se * a.se + b.se * b.se).sqrt();
    let d = a.mean - b.mean;
    if s == 0.0 {
        if d.abs() <= 1e-12 { 0.0 } else { d.signum() * f64::INFINITY }
    } else {
        d / s
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Heat kernel `p_t(x) = exp(−x²/2t)/√(2πt)`.
pub fn heat_kernel(t: f64, x: f64) -> f64 {
    (-x * x / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt()
}

/// `P_x(B_t ∈ (a, b))` for a standard Brownian motion.
pub fn bm_interval_prob(x: f64, t: f64, a: f64, b: f64) -> f64 {
    if t <= 0.0 {
        return if x > a && x < b { 1.0 } else { 0.0 };
    }
    let s = t.sqrt();
    normal_cdf((b - x) / s) - normal_cdf((a - x) / s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulator_matches_direct_formulas() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let acc: Accumulator = xs.iter().copied().collect();
        assert_eq!(acc.mean(), 3.5);
        let var = xs.iter().map(|x| (x - 3.5_f64).powi(2)).sum::<f64>() / 3.0;
        assert!((acc.variance() - var).abs() < 1e-12);
        assert!((acc.se() - (var / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn interval_probability_is_a_probability() {
        assert!((bm_interval_prob(0.0, 1.0, f64::NEG_INFINITY, f64::INFINITY) - 1.0).abs() < 1e-15);
        assert!((bm_interval_prob(0.0, 1.0, 0.0, f64::INFINITY) - 0.5).abs() < 1e-15);
        assert_eq!(bm_interval_prob(0.5, 0.0, 0.0, 1.0), 1.0);
    }
}
