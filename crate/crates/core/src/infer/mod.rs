//! Uncertainty quantification for trained ensembles.

pub mod intervals;
pub mod vi;

use serde::{Deserialize, Serialize};

use crate::boost::BratModel;
use crate::data::Dataset;
use crate::error::{BratError, Result};
use crate::kernel::nystrom::{nystrom_build, LandmarkIndex, NystromSketch, SketchMethod};
use crate::kernel::{estimate_k_matrix, KernelOptions, KrrSolver, KrrWeights, Symmetrized, TreeKernel};

pub use intervals::{
    calibrate_from_widths, confidence_interval, half_width, prediction_interval, reproduction_interval,
    Interval, IntervalKind,
};
pub use vi::{variable_importance_test, vi_test_from_models, ViSketch, ViTestResult};

/// Smallest calibration set accepted by [`calibrate_widths`].
pub const MIN_CALIBRATION: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    pub sigma_hat: f64,
    pub n_calib: usize,
}

/// Root mean squared residual of the rescaled predictions on `calib`.
pub fn estimate_sigma(model: &BratModel, calib: &Dataset) -> Result<NoiseEstimate> {
    if calib.n() == 0 {
        return Err(BratError::Data("empty calibration set".into()));
    }
    let preds = model.predict_dataset(calib, true)?;
    Ok(sigma_from_residuals(&preds, calib.response()))
}

pub fn sigma_from_residuals(preds: &[f64], y: &[f64]) -> NoiseEstimate {
    let ss: f64 = preds.iter().zip(y).map(|(p, v)| (v - p).powi(2)).sum();
    NoiseEstimate {
        sigma_hat: (ss / y.len() as f64).sqrt(),
        n_calib: y.len(),
    }
}

/// Settings for the sketched inference path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchOptions {
    pub s: usize,
    #[serde(default)]
    pub method: SketchMethod,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub symmetrize: bool,
}

enum Backend<'m> {
    Exact(KrrSolver),
    Sketch {
        sketch: NystromSketch,
        index: LandmarkIndex<'m>,
    },
}

/// Prediction and KRR weight norm at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointEstimate {
    /// Rescaled model prediction.
    pub prediction: f64,
    pub r_norm: f64,
}

/// A trained model together with what is needed to evaluate `‖r̂(x)‖`,
/// either exactly from a dense `K̂` or through a Nyström sketch.
pub struct Inference<'m> {
    model: &'m BratModel,
    kernel: TreeKernel<'m>,
    backend: Backend<'m>,
}

impl<'m> Inference<'m> {
    pub fn exact(model: &'m BratModel, opts: &KernelOptions) -> Result<Self> {
        let kernel = TreeKernel::from_model(model)?;
        let ke = estimate_k_matrix(model, opts)?;
        Ok(Inference {
            model,
            kernel,
            backend: Backend::Exact(ke.solver()?),
        })
    }

    /// `y` is only needed for sketched KRR predictions.
    pub fn sketched(model: &'m BratModel, opts: &SketchOptions, y: Option<&[f64]>) -> Result<Self> {
        let kernel = TreeKernel::from_model(model)?;
        let system = model.params().krr_system();
        let sketch = if opts.symmetrize {
            nystrom_build(&Symmetrized(&kernel), system, opts.s, opts.method, y, opts.seed)?
        } else {
            nystrom_build(&kernel, system, opts.s, opts.method, y, opts.seed)?
        };
        let index = LandmarkIndex::new(&kernel, sketch.landmarks());
        Ok(Inference {
            model,
            kernel,
            backend: Backend::Sketch { sketch, index },
        })
    }

    pub fn model(&self) -> &'m BratModel {
        self.model
    }

    pub fn kernel(&self) -> &TreeKernel<'m> {
        &self.kernel
    }

    pub fn sketch(&self) -> Option<&NystromSketch> {
        match &self.backend {
            Backend::Sketch { sketch, .. } => Some(sketch),
            Backend::Exact(_) => None,
        }
    }

    pub fn is_sketched(&self) -> bool {
        self.sketch().is_some()
    }

    /// Landmark coordinates `k̃(x)`; sketched path only.
    pub fn ktilde(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.backend {
            Backend::Sketch { index, .. } => index.coords(x),
            Backend::Exact(_) => Err(BratError::Data("exact inference has no landmarks".into())),
        }
    }

    /// `r̂(x)` (exact) or `r̃(x)` (sketched), length n.
    pub fn weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.backend {
            Backend::Exact(solver) => Ok(solver.weights(&self.kernel.k_vec(x)?)?.r),
            Backend::Sketch { sketch, index } => sketch.weights(&index.coords(x)?),
        }
    }

    /// Exact weights with their norm and sum; exact path only.
    pub fn krr_weights(&self, x: &[f64]) -> Result<KrrWeights> {
        match &self.backend {
            Backend::Exact(solver) => solver.weights(&self.kernel.k_vec(x)?),
            Backend::Sketch { .. } => Err(BratError::Data("sketched inference has no exact weights".into())),
        }
    }

    pub fn r_norm(&self, x: &[f64]) -> Result<f64> {
        match &self.backend {
            Backend::Exact(solver) => Ok(solver.weights(&self.kernel.k_vec(x)?)?.norm2),
            Backend::Sketch { sketch, index } => sketch.r_norm(&index.coords(x)?),
        }
    }

    /// KRR prediction `⟨r̂(x), y⟩` on the raw scale. The sketched path uses
    /// the response the sketch was built with and ignores `y`.
    pub fn krr_predict(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match &self.backend {
            Backend::Exact(solver) => Ok(solver.weights(&self.kernel.k_vec(x)?)?.dot(y)),
            Backend::Sketch { sketch, index } => sketch.predict(&index.coords(x)?),
        }
    }

    pub fn point(&self, x: &[f64]) -> Result<PointEstimate> {
        Ok(PointEstimate {
            prediction: self.model.predict(x, true)?,
            r_norm: self.r_norm(x)?,
        })
    }

    pub fn points(&self, ds: &Dataset) -> Result<Vec<PointEstimate>> {
        use rayon::prelude::*;
        (0..ds.n()).into_par_iter().map(|i| self.point(ds.row(i))).collect()
    }

    pub fn interval(
        &self,
        x: &[f64],
        kind: IntervalKind,
        alpha: f64,
        sigma_hat: f64,
        gamma: f64,
    ) -> Result<Interval> {
        let p = self.point(x)?;
        intervals::interval(kind, p.prediction, p.r_norm, sigma_hat, alpha, gamma, self.model.rescale())
    }
}

/// Width multiplier for `kind` giving at least `1 − α` coverage of `calib`.
pub fn calibrate_widths(
    engine: &Inference<'_>,
    calib: &Dataset,
    alpha: f64,
    kind: IntervalKind,
    sigma_hat: f64,
) -> Result<f64> {
    if calib.n() < MIN_CALIBRATION {
        return Err(BratError::Data(format!(
            "calibration needs at least {MIN_CALIBRATION} points, got {}",
            calib.n()
        )));
    }
    let points = engine.points(calib)?;
    let rescale = engine.model().rescale();
    let centers: Vec<f64> = points.iter().map(|p| p.prediction).collect();
    let widths = points
        .iter()
        .map(|p| half_width(kind, p.r_norm, sigma_hat, alpha, 1.0, rescale))
        .collect::<Result<Vec<f64>>>()?;
    calibrate_from_widths(&centers, &widths, calib.response(), alpha)
}
