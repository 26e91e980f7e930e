//! Ensemble statistics: moments with standard errors, trend checks and a
//! one-sample Kolmogorov–Smirnov test against a centred normal.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Unbiased sample covariance.
pub fn covariance(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let (mx, my) = (mean(x), mean(y));
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1) as f64
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn new(value: f64, se: f64) -> Self {
        Self { value, se }
    }

    /// `|value − target| ≤ k·se`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.se
    }

    pub fn z_score(&self, target: f64) -> f64 {
        if self.se == 0.0 {
            if self.value == target {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.value - target) / self.se
        }
    }
}

pub fn mean_estimate(x: &[f64]) -> Estimate {
    Estimate::new(mean(x), (variance(x) / x.len() as f64).sqrt())
}

/// Sample variance with a fourth-moment based standard error.
pub fn variance_estimate(x: &[f64]) -> Estimate {
    let n = x.len() as f64;
    let m = mean(x);
    let v = variance(x);
    let m4 = x.iter().map(|a| (a - m).powi(4)).sum::<f64>() / n;
    let se = ((m4 - v * v * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt();
    Estimate::new(v, se)
}

/// Sample covariance with standard error from the products `(x−x̄)(y−ȳ)`.
pub fn covariance_estimate(x: &[f64], y: &[f64]) -> Estimate {
    let (mx, my) = (mean(x), mean(y));
    let prods: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let n = x.len() as f64;
    Estimate::new(covariance(x, y), (variance(&prods) / n).sqrt())
}

pub fn skewness(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = mean(x);
    let m2 = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
    let m3 = x.iter().map(|a| (a - m).powi(3)).sum::<f64>() / n;
    if m2 == 0.0 {
        return 0.0;
    }
    m3 / m2.powf(1.5)
}

pub fn excess_kurtosis(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = mean(x);
    let m2 = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|a| (a - m).powi(4)).sum::<f64>() / n;
    if m2 == 0.0 {
        return 0.0;
    }
    m4 / (m2 * m2) - 3.0
}

/// Kolmogorov survival function `P(K > λ)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample KS test against `N(0, variance)`, p-value from the asymptotic
/// distribution with the Stephens small-sample correction.
pub fn ks_normal(samples: &[f64], variance: f64) -> Result<KsResult> {
    if samples.is_empty() {
        return Err(Error::InsufficientSamples("KS test needs samples".into()));
    }
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(crate::error::invalid("variance", format!("must be positive, got {variance}")));
    }
    let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| crate::error::invalid("variance", e.to_string()))?;
    let mut x = samples.to_vec();
    x.sort_by(|a, b| a.total_cmp(b));
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (i, v) in x.iter().enumerate() {
        let f = normal.cdf(*v);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let sn = n.sqrt();
    let p = kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d);
    Ok(KsResult { statistic: d, p_value: p })
}

/// Strictly decreasing sequence.
pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::ScalarStream;

    #[test]
    fn moments_of_small_sample() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&x), 2.5);
        assert!((variance(&x) - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(skewness(&x), 0.0);
        assert!((excess_kurtosis(&x) - (-1.36)).abs() < 1e-12);
        assert!((covariance(&x, &x) - variance(&x)).abs() < 1e-15);
    }

    #[test]
    fn kolmogorov_tail_values() {
        // tabulated: P(K > 1.3581) ≈ 0.05, P(K > 1.6276) ≈ 0.01
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_sf(1.6276) - 0.01).abs() < 1e-3);
        assert_eq!(kolmogorov_sf(0.0), 1.0);
    }

    #[test]
    fn ks_calibration_and_power() {
        let mut passes = 0;
        let reruns = 200;
        for r in 0..reruns {
            let mut s = ScalarStream::new(99, 7, r);
            let x: Vec<f64> = (0..512).map(|_| s.normal()).collect();
            if ks_normal(&x, 1.0).unwrap().p_value > 0.01 {
                passes += 1;
            }
        }
        assert!(passes as f64 >= 0.98 * reruns as f64 - 2.0, "{passes}/{reruns}");
        let mut s = ScalarStream::new(99, 8, 0);
        let e: Vec<f64> = (0..512).map(|_| -(1.0 - s.uniform()).ln() - 1.0).collect();
        assert!(ks_normal(&e, 1.0).unwrap().p_value < 0.01);
    }

    #[test]
    fn trend_helper() {
        assert!(strictly_decreasing(&[3.0, 2.0, 1.0]));
        assert!(!strictly_decreasing(&[3.0, 3.0, 1.0]));
        assert!(strictly_decreasing(&[1.0]));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn variance_is_shift_invariant_and_nonnegative(x in proptest::collection::vec(-1e3f64..1e3, 2..64), c in -1e3f64..1e3) {
                let v = variance(&x);
                let shifted: Vec<f64> = x.iter().map(|a| a + c).collect();
                prop_assert!(v >= 0.0);
                prop_assert!((variance(&shifted) - v).abs() <= 1e-9 * (1.0 + v));
                prop_assert!((covariance(&x, &x) - v).abs() <= 1e-9 * (1.0 + v));
            }

            #[test]
            fn ks_outputs_are_probabilities(x in proptest::collection::vec(-5.0f64..5.0, 8..128), var in 0.1f64..4.0) {
                let r = ks_normal(&x, var).unwrap();
                prop_assert!((0.0..=1.0).contains(&r.p_value));
                prop_assert!((0.0..=1.0).contains(&r.statistic));
            }
        }
    }
}
