//! Sample means, standard errors and the 3-sigma check record.

use serde::Serialize;

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, std_error: 0.0, n_samples: 0 }
    }

    /// Mean and `sd / sqrt(n)` (unbiased sample variance; zero error for `n < 2`).
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { value: f64::NAN, std_error: f64::NAN, n_samples: 0 };
        }
        // Shifting by the first sample makes constant inputs exact.
        let x0 = xs[0];
        let mean = x0 + xs.iter().map(|x| x - x0).sum::<f64>() / n as f64;
        let se = if n < 2 {
            0.0
        } else {
            let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
            (ss / (n as f64 - 1.0)).sqrt() / (n as f64).sqrt()
        };
        Self { value: mean, std_error: se, n_samples: n }
    }

    /// Mean of `f(x)` over `xs`, accumulated in input order.
    pub fn from_map<F: Fn(f64) -> f64>(xs: &[f64], f: F) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self::from_samples(&[]);
        }
        let mut sum = 0.0;
        let mut sq = 0.0;
        for &x in xs {
            let v = f(x);
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = if n < 2 { 0.0 } else { ((sq - n as f64 * mean * mean) / (n as f64 - 1.0)).max(0.0) };
        // The one-pass variance can cancel badly when the spread is tiny.
        let var = if var < 1e-10 * mean * mean && n >= 2 {
            xs.iter().map(|&x| (f(x) - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)
        } else {
            var
        };
        Self { value: mean, std_error: (var / n as f64).sqrt(), n_samples: n }
    }

    /// Combined standard error of `self - other` for independent estimates.
    pub fn combined_se(&self, other: &Estimate) -> f64 {
        self.std_error.hypot(other.std_error)
    }

    /// True when `|self - target| <= k * se`, with `se` the larger of the
    /// supplied error and an absolute floor for exact comparisons.
    pub fn within(&self, target: f64, k: f64, se: f64, floor: f64) -> bool {
        (self.value - target).abs() <= k * se + floor
    }
}

/// Ratio of two means computed on the same draws, `mean(num) / mean(den)`,
/// with a delta-method standard error that accounts for their covariance.
pub fn ratio_estimate(num: &[f64], den: &[f64]) -> Estimate {
    assert_eq!(num.len(), den.len());
    let n = num.len() as f64;
    let mn = num.iter().sum::<f64>() / n;
    let md = den.iter().sum::<f64>() / n;
    let r = mn / md;
    if num.len() < 2 {
        return Estimate { value: r, std_error: 0.0, n_samples: num.len() };
    }
    // Residuals of the linearized ratio.
    let ss: f64 = num.iter().zip(den).map(|(a, b)| (a - r * b).powi(2)).sum();
    let se = (ss / (n - 1.0)).sqrt() / (n.sqrt() * md.abs());
    Estimate { value: r, std_error: se, n_samples: num.len() }
}

/// Outcome of one statistical verification, always reported with its error bar.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub estimate: f64,
    pub reference: f64,
    pub std_error: f64,
    /// Allowed absolute deviation (e.g. `3 * std_error` plus a numeric floor).
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    pub fn new(name: impl Into<String>, estimate: f64, reference: f64, std_error: f64, tolerance: f64) -> Self {
        let passed = (estimate - reference).abs() <= tolerance;
        Self { name: name.into(), estimate, reference, std_error, tolerance, passed }
    }

    /// One-sided check `estimate <= reference + tolerance`.
    pub fn at_most(name: impl Into<String>, estimate: f64, reference: f64, std_error: f64, tolerance: f64) -> Self {
        let passed = estimate <= reference + tolerance;
        Self { name: name.into(), estimate, reference, std_error, tolerance, passed }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {}: estimate {:.6e} reference {:.6e} (se {:.2e}, tol {:.2e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.estimate,
            self.reference,
            self.std_error,
            self.tolerance
        )
    }
}
