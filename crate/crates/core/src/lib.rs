//! Boulevard-regularized boosted regression trees with uncertainty
//! quantification.
//!
//! Training ([`boost`]) produces an ensemble whose predictions converge to
//! a kernel ridge regression in the ensemble's own tree kernel. The
//! [`kernel`] module rebuilds that kernel from the stored trees, and
//! [`infer`] turns it into confidence, prediction and reproduction
//! intervals and a chi-squared variable-importance test.

pub mod boost;
pub mod data;
pub mod error;
pub mod infer;
pub mod kernel;
mod params;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod tree;

pub use boost::{
    fixed_point_oracle, train, train_observed, train_with_log, truncate, Algo, BoostParams, BratModel, Freeze,
    RoundLog, Truncation,
};
pub use data::{
    gen_friedman, gen_sine_quadratic, gen_vi, load_csv, split, write_csv, Dataset, MinMaxScaler, SplitSpec,
};
pub use error::{BratError, Result};
pub use infer::{
    calibrate_widths, estimate_sigma, variable_importance_test, Inference, Interval, IntervalKind,
    NoiseEstimate, SketchOptions, ViSketch, ViTestResult,
};
pub use kernel::{
    estimate_k_matrix, krr_weights_d, krr_weights_p, KernelEstimate, KernelOptions, KrrSystem, KrrWeights,
    NystromSketch, SketchMethod, TreeKernel,
};
pub use tree::{fit_tree, MinLeaf, Node, RegressionTree, SplitRule, TreeParams};
