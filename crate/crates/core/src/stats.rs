//! Distribution quantiles and the one-sample Kolmogorov–Smirnov test.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{BratError, Result};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal is valid")
}

pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(BratError::param("p", format!("{p} is outside (0, 1)")));
    }
    Ok(std_normal().inverse_cdf(p))
}

/// `z_{1−α/2}`.
pub fn z_two_sided(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BratError::param("alpha", format!("{alpha} is outside (0, 1)")));
    }
    normal_quantile(1.0 - alpha / 2.0)
}

fn chi2(dof: usize) -> Result<ChiSquared> {
    ChiSquared::new(dof as f64).map_err(|_| BratError::param("dof", "must be at least 1"))
}

pub fn chi2_quantile(dof: usize, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(BratError::param("p", format!("{p} is outside (0, 1)")));
    }
    Ok(chi2(dof)?.inverse_cdf(p))
}

/// Upper tail `P(X > x)`.
pub fn chi2_sf(dof: usize, x: f64) -> Result<f64> {
    if x <= 0.0 {
        return Ok(1.0);
    }
    Ok(chi2(dof)?.sf(x).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Kolmogorov survival function `Q(t) = 2 Σ (−1)^{j−1} exp(−2 j² t²)`.
fn kolmogorov_sf(t: f64) -> f64 {
    if t < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=200 {
        let term = (-2.0 * (j * j) as f64 * t * t).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// KS test of `samples` against N(0, 1), with the p-value from the
/// asymptotic distribution under the small-sample correction
/// `(√n + 0.12 + 0.11/√n) D`.
pub fn ks_test_normal(samples: &[f64]) -> Result<KsResult> {
    if samples.is_empty() {
        return Err(BratError::Data("KS test needs at least one sample".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(BratError::Data("KS test samples must be finite".into()));
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &v) in x.iter().enumerate() {
        let f = normal_cdf(v);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sq = n.sqrt();
    let p_value = kolmogorov_sf((sq + 0.12 + 0.11 / sq) * d);
    Ok(KsResult {
        statistic: d,
        p_value,
    })
}
