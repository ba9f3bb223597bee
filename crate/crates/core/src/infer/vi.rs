//! Chi-squared test of whether dropping features changes the regression
//! function.
//!
//! The training set is halved. Model 1 is trained on half 1 with every
//! feature, model 2 on half 2 with the reduced feature set. At holdout
//! points `x_l` the KRR predictions differ by
//! `d_l = r̂₁(x_l)ᵀy₁ − r̂₂(x_l)ᵀy₂`. Stacking the weight vectors into
//! `W₁` (n₁ × m) and `W₂` (n₂ × m), which is the zero-padded
//! `(R₁ − R₂)` over the concatenated response, gives
//! `Ξ = W₁ᵀW₁ + W₂ᵀW₂` and the statistic `σ̂⁻² dᵀ Ξ⁻¹ d ~ χ²_m` under H₀.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::boost::{train, BoostParams, BratModel};
use crate::data::Dataset;
use crate::error::{BratError, Result};
use crate::infer::{estimate_sigma, Inference, SketchOptions};
use crate::kernel::nystrom::SketchMethod;
use crate::kernel::KernelOptions;
use crate::rng::child_rng;
use crate::stats::{chi2_quantile, chi2_sf};

/// Largest holdout handled without sketching.
pub const MAX_EXACT_HOLDOUT: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViSketch {
    /// Landmarks per model.
    pub s: usize,
    /// Holdout points used in the test, which is also its degrees of freedom.
    pub r: usize,
    #[serde(default)]
    pub method: SketchMethod,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTestResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub reject: bool,
    pub jitter_used: f64,
}

/// Trains both models and runs the test. `reduced` lists the feature
/// columns kept by model 2.
pub fn variable_importance_test(
    full: &Dataset,
    reduced: &[usize],
    holdout: &Dataset,
    params: &BoostParams,
    alpha: f64,
    sketch: Option<ViSketch>,
) -> Result<ViTestResult> {
    if full.n() < 4 {
        return Err(BratError::Data("the test needs at least 4 training points".into()));
    }
    if holdout.d() != full.d() {
        return Err(BratError::Dimension {
            expected: full.d(),
            got: holdout.d(),
        });
    }
    let mut idx: Vec<usize> = (0..full.n()).collect();
    idx.shuffle(&mut child_rng(params.seed, &[0x7669]));
    let half = full.n() / 2;
    let (mut a, mut b) = (idx[..half].to_vec(), idx[half..].to_vec());
    a.sort_unstable();
    b.sort_unstable();
    let train1 = full.subset(&a);
    let train2 = full.subset(&b).select_columns(reduced)?;
    let m1 = train(&train1, params)?;
    let m2 = train(&train2, params)?;
    // model 1 never saw half 2, and half 2 is far larger than the holdout
    let sigma = estimate_sigma(&m1, &full.subset(&b))?.sigma_hat;
    vi_test_from_models(&m1, &train1, &m2, &train2, holdout, reduced, alpha, sigma, sketch)
}

/// The test for two trained models. `holdout` has all features; model 2
/// sees only the columns in `reduced`.
#[allow(clippy::too_many_arguments)]
pub fn vi_test_from_models(
    m1: &BratModel,
    train1: &Dataset,
    m2: &BratModel,
    train2: &Dataset,
    holdout: &Dataset,
    reduced: &[usize],
    alpha: f64,
    sigma_hat: f64,
    sketch: Option<ViSketch>,
) -> Result<ViTestResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BratError::param("alpha", format!("{alpha} is outside (0, 1)")));
    }
    if holdout.n() == 0 {
        return Err(BratError::Data("empty holdout set".into()));
    }
    if m1.train_n() != train1.n() || m2.train_n() != train2.n() {
        return Err(BratError::Data("models and training sets disagree in size".into()));
    }
    let holdout2 = holdout.select_columns(reduced)?;
    let (d, xi) = match sketch {
        None => {
            if holdout.n() > MAX_EXACT_HOLDOUT {
                return Err(BratError::Data(format!(
                    "holdout of {} points exceeds {MAX_EXACT_HOLDOUT}; use the sketched test",
                    holdout.n()
                )));
            }
            exact_parts(m1, train1, m2, train2, holdout, &holdout2)?
        }
        Some(sk) => sketched_parts(m1, train1, m2, train2, holdout, &holdout2, sk)?,
    };
    chi2_decision(&d, &xi, sigma_hat, alpha)
}

fn weight_matrix(engine: &Inference<'_>, pts: &Dataset) -> Result<DMatrix<f64>> {
    use rayon::prelude::*;
    let cols: Vec<Vec<f64>> = (0..pts.n())
        .into_par_iter()
        .map(|l| engine.weights(pts.row(l)))
        .collect::<Result<_>>()?;
    let n = engine.model().train_n();
    Ok(DMatrix::from_fn(n, pts.n(), |i, l| cols[l][i]))
}

fn exact_parts(
    m1: &BratModel,
    train1: &Dataset,
    m2: &BratModel,
    train2: &Dataset,
    hold1: &Dataset,
    hold2: &Dataset,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let opts = KernelOptions::default();
    let w1 = weight_matrix(&Inference::exact(m1, &opts)?, hold1)?;
    let w2 = weight_matrix(&Inference::exact(m2, &opts)?, hold2)?;
    let y1 = DVector::from_column_slice(train1.response());
    let y2 = DVector::from_column_slice(train2.response());
    let d = w1.tr_mul(&y1) - w2.tr_mul(&y2);
    let xi = w1.tr_mul(&w1) + w2.tr_mul(&w2);
    Ok((d, xi))
}

fn sketched_parts(
    m1: &BratModel,
    train1: &Dataset,
    m2: &BratModel,
    train2: &Dataset,
    hold1: &Dataset,
    hold2: &Dataset,
    sk: ViSketch,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if sk.r == 0 || sk.r > hold1.n() {
        return Err(BratError::param("sketch.r", format!("{} is outside [1, {}]", sk.r, hold1.n())));
    }
    let mut pick: Vec<usize> = (0..hold1.n()).collect();
    pick.shuffle(&mut child_rng(sk.seed, &[0x72]));
    let mut pick = pick[..sk.r].to_vec();
    pick.sort_unstable();
    let (h1, h2) = (hold1.subset(&pick), hold2.subset(&pick));

    let side = |model: &BratModel, tr: &Dataset, h: &Dataset, stream: u64| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let opts = SketchOptions {
            s: sk.s.min(tr.n()),
            method: sk.method,
            seed: crate::rng::derive_seed(sk.seed, &[stream]),
            symmetrize: false,
        };
        let engine = Inference::sketched(model, &opts, Some(tr.response()))?;
        let sketch = engine.sketch().expect("sketched engine");
        let coords: Vec<Vec<f64>> = h.rows().map(|x| engine.ktilde(x)).collect::<Result<_>>()?;
        let kappa = DMatrix::from_fn(sketch.s(), h.n(), |p, l| coords[l][p]);
        let alpha = sketch.alpha_tilde().expect("built with a response");
        let pred = kappa.tr_mul(alpha);
        let cov = kappa.tr_mul(&(sketch.sigma_hat() * &kappa));
        Ok((pred, cov))
    };
    let (p1, c1) = side(m1, train1, &h1, 1)?;
    let (p2, c2) = side(m2, train2, &h2, 2)?;
    Ok((p1 - p2, c1 + c2))
}

/// `σ̂⁻² dᵀ Ξ⁻¹ d` against `χ²_m`, jittering `Ξ` once if it is singular.
pub fn chi2_decision(d: &DVector<f64>, xi: &DMatrix<f64>, sigma_hat: f64, alpha: f64) -> Result<ViTestResult> {
    let m = d.len();
    if xi.nrows() != m || xi.ncols() != m || m == 0 {
        return Err(BratError::Data("difference vector and covariance disagree".into()));
    }
    if !(sigma_hat >= 0.0) {
        return Err(BratError::param("sigma_hat", "must be nonnegative"));
    }
    let sym = (xi + xi.transpose()) * 0.5;
    let mut jitter_used = 0.0;
    let quad = if d.iter().all(|&v| v == 0.0) {
        0.0
    } else {
        let chol = match sym.clone().cholesky() {
            Some(c) => c,
            None => {
                let trace = sym.trace();
                let jitter = 1e-8 * trace / m as f64;
                if !(jitter > 0.0) {
                    return Err(BratError::Numerical("difference covariance is zero".into()));
                }
                jitter_used = jitter;
                (&sym + DMatrix::identity(m, m) * jitter)
                    .cholesky()
                    .ok_or_else(|| BratError::Numerical("difference covariance is singular".into()))?
            }
        };
        d.dot(&chol.solve(d))
    };
    let statistic = if quad == 0.0 {
        0.0
    } else if sigma_hat > 0.0 {
        quad / (sigma_hat * sigma_hat)
    } else {
        return Err(BratError::Numerical("noise estimate is zero".into()));
    };
    let critical = chi2_quantile(m, 1.0 - alpha)?;
    Ok(ViTestResult {
        statistic,
        dof: m,
        p_value: chi2_sf(m, statistic)?,
        reject: statistic > critical,
        jitter_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boost::Algo;
    use crate::data::gen_vi;

    #[test]
    fn one_dimensional_examples() {
        let d = DVector::from_element(1, 2.0);
        let xi = DMatrix::from_element(1, 1, 1.0);
        let r = chi2_decision(&d, &xi, 1.0, 0.05).unwrap();
        assert_eq!(r.statistic, 4.0);
        assert!(r.reject);
        let r = chi2_decision(&d, &xi, 2.0, 0.05).unwrap();
        assert_eq!(r.statistic, 1.0);
        assert!(!r.reject);
        assert!((0.0..=1.0).contains(&r.p_value));
    }

    #[test]
    fn singular_covariance_is_jittered() {
        let d = DVector::from_column_slice(&[1.0, 1.0]);
        let xi = DMatrix::from_element(2, 2, 1.0);
        let r = chi2_decision(&d, &xi, 1.0, 0.05).unwrap();
        assert!(r.jitter_used > 0.0);
        let zero = DMatrix::zeros(2, 2);
        assert!(chi2_decision(&d, &zero, 1.0, 0.05).is_err());
    }

    #[test]
    fn identical_models_give_zero() {
        let (full, _) = gen_vi(120, 1.0, 0.0, 5).unwrap();
        let (hold, _) = gen_vi(15, 1.0, 0.0, 6).unwrap();
        let mut p = BoostParams::new(Algo::BratD);
        p.rounds = 20;
        let model = train(&full, &p).unwrap();
        let twin = train(&full, &p).unwrap();
        let r = vi_test_from_models(&model, &full, &twin, &full, &hold, &[0, 1, 2], 0.05, 1.0, None).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(!r.reject);
    }

    #[test]
    fn scale_invariance() {
        let (full, _) = gen_vi(160, 1.0, 2.0, 7).unwrap();
        let (hold, _) = gen_vi(10, 1.0, 2.0, 8).unwrap();
        let mut p = BoostParams::new(Algo::BratD);
        p.rounds = 20;
        let base = variable_importance_test(&full, &[0, 1], &hold, &p, 0.05, None).unwrap();
        let scaled = full.with_response(full.response().iter().map(|v| 3.0 * v).collect()).unwrap();
        let hold_s = hold.with_response(hold.response().iter().map(|v| 3.0 * v).collect()).unwrap();
        let r = variable_importance_test(&scaled, &[0, 1], &hold_s, &p, 0.05, None).unwrap();
        assert_eq!(r.reject, base.reject);
        assert!((r.statistic - base.statistic).abs() <= 1e-6 * base.statistic.max(1.0));
    }

    #[test]
    fn sketched_test_runs() {
        let (full, _) = gen_vi(200, 1.0, 2.0, 9).unwrap();
        let (hold, _) = gen_vi(30, 1.0, 2.0, 10).unwrap();
        let mut p = BoostParams::new(Algo::BratD);
        p.rounds = 20;
        let sk = ViSketch {
            s: 40,
            r: 12,
            method: SketchMethod::Uniform,
            seed: 1,
        };
        let r = variable_importance_test(&full, &[0, 1], &hold, &p, 0.05, Some(sk)).unwrap();
        assert_eq!(r.dof, 12);
        assert!(r.statistic >= 0.0);
    }
}
