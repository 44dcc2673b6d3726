//! Binomial confidence intervals for Monte Carlo success rates.

use serde::Serialize;

/// A proportion with a two-sided interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Proportion {
    pub successes: usize,
    pub trials: usize,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Normal quantile for a 95% two-sided interval.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval.
pub fn wilson(successes: usize, trials: usize, z: f64) -> Proportion {
    assert!(trials > 0 && successes <= trials);
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    Proportion { successes, trials, estimate: p, lower: (center - half).max(0.0), upper: (center + half).min(1.0) }
}

/// Wald interval, falling back to the rule of three when every trial
/// succeeded or every trial failed.
pub fn wald_or_rule_of_three(successes: usize, trials: usize, z: f64) -> Proportion {
    assert!(trials > 0 && successes <= trials);
    let n = trials as f64;
    let p = successes as f64 / n;
    let (lower, upper) = if successes == trials {
        ((1.0 - 3.0 / n).max(0.0), 1.0)
    } else if successes == 0 {
        (0.0, (3.0 / n).min(1.0))
    } else {
        let half = z * (p * (1.0 - p) / n).sqrt();
        ((p - half).max(0.0), (p + half).min(1.0))
    };
    Proportion { successes, trials, estimate: p, lower, upper }
}

/// Sample mean and unbiased standard deviation. Empty input gives NaN.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
