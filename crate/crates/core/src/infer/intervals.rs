//! Confidence, prediction and reproduction intervals, and width calibration.

use serde::{Deserialize, Serialize};

use crate::error::{BratError, Result};
use crate::stats::z_two_sided;

/// Largest and smallest width multipliers calibration may return.
pub const GAMMA_MIN: f64 = 1e-3;
pub const GAMMA_MAX: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalKind {
    /// For the regression function at `x`.
    Ci,
    /// For a new response at `x`.
    Pi,
    /// For the prediction of an independently retrained model.
    Ri,
}

impl IntervalKind {
    pub const ALL: [IntervalKind; 3] = [IntervalKind::Ci, IntervalKind::Pi, IntervalKind::Ri];

    pub fn as_str(self) -> &'static str {
        match self {
            IntervalKind::Ci => "ci",
            IntervalKind::Pi => "pi",
            IntervalKind::Ri => "ri",
        }
    }
}

impl std::fmt::Display for IntervalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for IntervalKind {
    type Err = BratError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ci" => Ok(IntervalKind::Ci),
            "pi" => Ok(IntervalKind::Pi),
            "ri" => Ok(IntervalKind::Ri),
            _ => Err(BratError::param("kinds", format!("unknown interval kind `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub center: f64,
    pub half_width: f64,
    pub kind: IntervalKind,
    pub alpha: f64,
    pub gamma: f64,
}

impl Interval {
    pub fn lower(&self) -> f64 {
        self.center - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.center + self.half_width
    }

    /// Closed membership; the endpoints count even when `center ± half_width`
    /// rounds differently from `|v − center|`.
    pub fn contains(&self, v: f64) -> bool {
        (v - self.center).abs() <= self.half_width || (self.lower() <= v && v <= self.upper())
    }
}

/// `gamma · z_{1−α/2} · rescale · σ̂ · g(‖r̂‖)` with `g(t) = t` for CIs,
/// `sqrt(1 + t²)` for PIs and `√2 t` for RIs.
pub fn half_width(
    kind: IntervalKind,
    r_norm: f64,
    sigma_hat: f64,
    alpha: f64,
    gamma: f64,
    rescale: f64,
) -> Result<f64> {
    let z = z_two_sided(alpha)?;
    if !(r_norm >= 0.0 && sigma_hat >= 0.0 && gamma >= 0.0 && rescale > 0.0) {
        return Err(BratError::param(
            "interval",
            "norm, sigma and gamma must be nonnegative and rescale positive",
        ));
    }
    let spread = match kind {
        IntervalKind::Ci => r_norm,
        IntervalKind::Pi => (1.0 + r_norm * r_norm).sqrt(),
        IntervalKind::Ri => std::f64::consts::SQRT_2 * r_norm,
    };
    Ok(gamma * (z * rescale * sigma_hat * spread))
}

/// Interval of `kind` around the rescaled prediction `center`.
pub fn interval(
    kind: IntervalKind,
    center: f64,
    r_norm: f64,
    sigma_hat: f64,
    alpha: f64,
    gamma: f64,
    rescale: f64,
) -> Result<Interval> {
    Ok(Interval {
        center,
        half_width: half_width(kind, r_norm, sigma_hat, alpha, gamma, rescale)?,
        kind,
        alpha,
        gamma,
    })
}

pub fn confidence_interval(
    center: f64,
    r_norm: f64,
    sigma_hat: f64,
    alpha: f64,
    gamma: f64,
    rescale: f64,
) -> Result<Interval> {
    interval(IntervalKind::Ci, center, r_norm, sigma_hat, alpha, gamma, rescale)
}

pub fn prediction_interval(
    center: f64,
    r_norm: f64,
    sigma_hat: f64,
    alpha: f64,
    gamma: f64,
    rescale: f64,
) -> Result<Interval> {
    interval(IntervalKind::Pi, center, r_norm, sigma_hat, alpha, gamma, rescale)
}

pub fn reproduction_interval(
    center: f64,
    r_norm: f64,
    sigma_hat: f64,
    alpha: f64,
    gamma: f64,
    rescale: f64,
) -> Result<Interval> {
    interval(IntervalKind::Ri, center, r_norm, sigma_hat, alpha, gamma, rescale)
}

/// Number of covered points needed for `1 − α` coverage of `m` points.
pub fn required_coverage(m: usize, alpha: f64) -> usize {
    ((1.0 - alpha) * m as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Smallest `γ ∈ [GAMMA_MIN, GAMMA_MAX]` such that intervals with
/// half-widths `γ · widths[i]` around `centers[i]` cover at least `1 − α`
/// of `responses`.
///
/// Coverage only changes where `γ` crosses one of the ratios
/// `|y_i − center_i| / width_i`, so the answer is the order statistic of
/// those ratios at the required count, clamped below at `GAMMA_MIN`.
pub fn calibrate_from_widths(
    centers: &[f64],
    widths: &[f64],
    responses: &[f64],
    alpha: f64,
) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BratError::param("alpha", format!("{alpha} is outside (0, 1)")));
    }
    let m = responses.len();
    if m == 0 || centers.len() != m || widths.len() != m {
        return Err(BratError::Data("calibration inputs must be nonempty and aligned".into()));
    }
    let mut ratios: Vec<f64> = (0..m)
        .map(|i| {
            let resid = (responses[i] - centers[i]).abs();
            if resid == 0.0 {
                0.0
            } else if widths[i] > 0.0 {
                resid / widths[i]
            } else {
                f64::INFINITY
            }
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let need = required_coverage(m, alpha);
    if need == 0 {
        return Ok(GAMMA_MIN);
    }
    let mut gamma = ratios[need - 1].max(GAMMA_MIN);
    // the ratio can round to just below what `gamma * width` needs
    let covered = |g: f64| {
        (0..m)
            .filter(|&i| (responses[i] - centers[i]).abs() <= g * widths[i])
            .count()
    };
    while gamma.is_finite() && covered(gamma) < need {
        gamma = gamma.next_up();
    }
    if gamma > GAMMA_MAX {
        return Err(BratError::Numerical("intervals uncalibratable".into()));
    }
    Ok(gamma)
}

/// Fraction of `responses` inside the intervals at multiplier `gamma`.
pub fn coverage_at(centers: &[f64], widths: &[f64], responses: &[f64], gamma: f64) -> f64 {
    let hit = (0..responses.len())
        .filter(|&i| (responses[i] - centers[i]).abs() <= gamma * widths[i])
        .count();
    hit as f64 / responses.len() as f64
}
