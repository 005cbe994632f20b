//! Functions sampled on a uniform grid with linear interpolation.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tabulated {
    pub x_min: f64,
    pub dx: f64,
    pub values: Vec<f64>,
}

impl Tabulated {
    pub fn from_fn(x_min: f64, x_max: f64, points: usize, f: impl Fn(f64) -> f64) -> Self {
        assert!(points >= 2 && x_max > x_min);
        let dx = (x_max - x_min) / (points - 1) as f64;
        let values = (0..points).map(|i| f(x_min + i as f64 * dx)).collect();
        Self { x_min, dx, values }
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + (self.values.len() - 1) as f64 * self.dx
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_min && x <= self.x_max()
    }

    /// Linear interpolation; `None` outside the tabulated range.
    pub fn eval(&self, x: f64) -> Option<f64> {
        if !self.contains(x) {
            return None;
        }
        let s = (x - self.x_min) / self.dx;
        let i = (s.floor() as usize).min(self.values.len() - 2);
        let w = s - i as f64;
        Some(self.values[i] * (1.0 - w) + self.values[i + 1] * w)
    }
}

/// A test function together with its second derivative, both tabulated on
/// the same range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub g: Tabulated,
    pub g2: Tabulated,
}

impl TestFunction {
    /// The smooth bump `exp(1 − 1/(1 − r²))`, `r = (x − center)/radius`,
    /// with its analytic second derivative.
    pub fn bump(center: f64, radius: f64, points: usize, margin: f64) -> Self {
        let g = move |x: f64| {
            let r = (x - center) / radius;
            let s = 1.0 - r * r;
            if s <= 0.0 { 0.0 } else { (1.0 - 1.0 / s).exp() }
        };
        // d/dx of exp(1 − 1/s) with s = 1 − r², r' = 1/R:
        // g' = g · (−2r/s²)/R, g'' = g/R² · [4r²/s⁴ − (2/s² + 8r²/s³)].
        let g2 = move |x: f64| {
            let r = (x - center) / radius;
            let s = 1.0 - r * r;
            if s <= 0.0 {
                return 0.0;
            }
            let gv = (1.0 - 1.0 / s).exp();
            let r2 = r * r;
            gv / (radius * radius) * (4.0 * r2 / s.powi(4) - 2.0 / (s * s) - 8.0 * r2 / s.powi(3))
        };
        let lo = center - radius - margin;
        let hi = center + radius + margin;
        Self { g: Tabulated::from_fn(lo, hi, points, g), g2: Tabulated::from_fn(lo, hi, points, g2) }
    }

    /// The constant 1 on `[lo, hi]` (`g'' = 0`).
    pub fn constant_one(lo: f64, hi: f64) -> Self {
        Self { g: Tabulated::from_fn(lo, hi, 2, |_| 1.0), g2: Tabulated::from_fn(lo, hi, 2, |_| 0.0) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation() {
        let t = Tabulated::from_fn(0.0, 1.0, 11, |x| 2.0 * x + 1.0);
        assert!((t.eval(0.33).unwrap() - 1.66).abs() < 1e-12);
        assert_eq!(t.eval(1.0).unwrap(), 3.0);
        assert!(t.eval(1.01).is_none());
    }

    #[test]
    fn bump_second_derivative_matches_finite_differences() {
        let f = TestFunction::bump(0.0, 1.0, 20_001, 0.5);
        let h = 1e-3;
        for x in [-0.7, -0.2, 0.0, 0.4, 0.85] {
            let g = |y: f64| f.g.eval(y).unwrap();
            let fd = (g(x + h) - 2.0 * g(x) + g(x - h)) / (h * h);
            let exact = f.g2.eval(x).unwrap();
            assert!((fd - exact).abs() < 2e-2 * (1.0 + exact.abs()), "x={x}: {fd} vs {exact}");
        }
    }
}
