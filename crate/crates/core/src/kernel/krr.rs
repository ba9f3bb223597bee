//! KRR weights `r̂(x)ᵀ = scale · k̂(x)ᵀ (aI + cK̂)⁻¹`.
//!
//! BRAT-D uses `a = 1/λ, c = q, scale = 1`; BRAT-P uses `a = 1, c = K − 1,
//! scale = K`. The same system gives the fixed point of the training
//! predictions, `scale · (aI + cK̄)⁻¹ K̄ y`.

use nalgebra::{DMatrix, DVector, LU};
use serde::{Deserialize, Serialize};

use crate::error::{BratError, Result};

/// Pivot ratio below which a factorization is treated as singular.
const SINGULAR_RATIO: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KrrSystem {
    pub a: f64,
    pub c: f64,
    pub scale: f64,
}

impl KrrSystem {
    pub fn dropout(lambda: f64, q: f64) -> Self {
        KrrSystem {
            a: 1.0 / lambda,
            c: q,
            scale: 1.0,
        }
    }

    pub fn parallel(trees_per_round: usize) -> Self {
        KrrSystem {
            a: 1.0,
            c: trees_per_round as f64 - 1.0,
            scale: trees_per_round as f64,
        }
    }

    /// `aI + cK̂`.
    pub fn matrix(&self, khat: &DMatrix<f64>) -> DMatrix<f64> {
        let n = khat.nrows();
        khat * self.c + DMatrix::identity(n, n) * self.a
    }

    /// Solves `(aI + cK̂) v = rhs`.
    pub fn solve(&self, khat: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.matrix(khat);
        let lu = factor(&m)?;
        lu.solve(rhs)
            .ok_or_else(|| singular(&m))
    }
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

fn singular(m: &DMatrix<f64>) -> BratError {
    BratError::Numerical(format!(
        "linear system is singular (condition number {:.3e})",
        condition_number(m)
    ))
}

fn factor(m: &DMatrix<f64>) -> Result<LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(BratError::Numerical("system matrix has non-finite entries".into()));
    }
    let lu = m.clone().lu();
    let diag = lu.u().diagonal();
    let max = diag.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = diag.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if max == 0.0 || min <= SINGULAR_RATIO * max {
        return Err(singular(m));
    }
    Ok(lu)
}

/// KRR weights at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct KrrWeights {
    pub r: Vec<f64>,
    pub norm2: f64,
    pub weight_sum: f64,
}

impl KrrWeights {
    fn from_vec(r: Vec<f64>) -> Self {
        let norm2 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let weight_sum = r.iter().sum();
        KrrWeights { r, norm2, weight_sum }
    }

    /// `⟨r, y⟩`, the KRR prediction on the raw scale.
    pub fn dot(&self, y: &[f64]) -> f64 {
        self.r.iter().zip(y).map(|(a, b)| a * b).sum()
    }
}

/// A factorized `(aI + cK̂)ᵀ` reused across many query points.
pub struct KrrSolver {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    system: KrrSystem,
    n: usize,
}

impl KrrSolver {
    pub fn new(khat: &DMatrix<f64>, system: KrrSystem) -> Result<Self> {
        if khat.nrows() != khat.ncols() {
            return Err(BratError::Data("kernel matrix is not square".into()));
        }
        let m = system.matrix(khat).transpose();
        Ok(KrrSolver {
            lu: factor(&m)?,
            system,
            n: khat.nrows(),
        })
    }

    pub fn system(&self) -> KrrSystem {
        self.system
    }

    pub fn weights(&self, khat: &[f64]) -> Result<KrrWeights> {
        if khat.len() != self.n {
            return Err(BratError::Dimension {
                expected: self.n,
                got: khat.len(),
            });
        }
        let rhs = DVector::from_column_slice(khat);
        let mut r = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| BratError::Numerical("KRR solve failed".into()))?;
        r *= self.system.scale;
        Ok(KrrWeights::from_vec(r.as_slice().to_vec()))
    }
}

/// `r̂ᵀ = k̂ᵀ(λ⁻¹I + qK̂)⁻¹`.
pub fn krr_weights_d(khat: &[f64], kmat: &DMatrix<f64>, lambda: f64, q: f64) -> Result<KrrWeights> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(BratError::param("lambda", "must lie in (0, 1]"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(BratError::param("q", "must lie in [0, 1]"));
    }
    KrrSolver::new(kmat, KrrSystem::dropout(lambda, q))?.weights(khat)
}

/// `r̂ᵀ = k̂ᵀ(I + (K−1)K̂)⁻¹ K`.
pub fn krr_weights_p(khat: &[f64], kmat: &DMatrix<f64>, trees_per_round: usize) -> Result<KrrWeights> {
    if trees_per_round < 1 {
        return Err(BratError::param("trees_per_round_K", "must be at least 1"));
    }
    KrrSolver::new(kmat, KrrSystem::parallel(trees_per_round))?.weights(khat)
}
