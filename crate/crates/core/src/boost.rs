//! Boulevard-averaged boosting: BRAT-D (dropout), BRAT-P (parallel columns)
//! and vanilla Boulevard, which is BRAT-D with no dropout.
//!
//! Trees are kept whole, with their leaf memberships, so that the kernel
//! module can rebuild the structure matrices after training.

use nalgebra::{DMatrix, DVector};
use rand::distr::{Bernoulli, Distribution};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MinMaxScaler};
use crate::error::{BratError, Result};
use crate::kernel::krr::KrrSystem;
use crate::params::NumberOrKeyword;
use crate::rng::{child_rng, Rng};
use crate::tree::{fit_tree, RegressionTree, SplitRule, TreeParams};

/// Attempts at drawing a row subsample large enough to fit a tree.
const MAX_REDRAWS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    BratD,
    BratP,
    Boulevard,
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algo::BratD => "brat_d",
            Algo::BratP => "brat_p",
            Algo::Boulevard => "boulevard",
        })
    }
}

impl std::str::FromStr for Algo {
    type Err = BratError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brat_d" => Ok(Algo::BratD),
            "brat_p" => Ok(Algo::BratP),
            "boulevard" => Ok(Algo::Boulevard),
            _ => Err(BratError::param("algo", format!("unknown algorithm `{s}`"))),
        }
    }
}

/// Bound for the hard truncation applied to partial-ensemble predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NumberOrKeyword", into = "NumberOrKeyword")]
pub enum Truncation {
    /// `2 * max |y_train|`.
    #[default]
    Auto,
    Off,
    Fixed(f64),
}

impl TryFrom<NumberOrKeyword> for Truncation {
    type Error = String;
    fn try_from(v: NumberOrKeyword) -> std::result::Result<Self, String> {
        match v {
            NumberOrKeyword::Number(m) => Ok(Truncation::Fixed(m)),
            k => k.expect_keyword(&["auto", "off"]).map(|k| {
                if k == "auto" {
                    Truncation::Auto
                } else {
                    Truncation::Off
                }
            }),
        }
    }
}

impl From<Truncation> for NumberOrKeyword {
    fn from(t: Truncation) -> Self {
        match t {
            Truncation::Auto => NumberOrKeyword::Keyword("auto".into()),
            Truncation::Off => NumberOrKeyword::Keyword("off".into()),
            Truncation::Fixed(m) => NumberOrKeyword::Number(m),
        }
    }
}

impl Truncation {
    /// The bound in effect for a given response, `None` when disabled.
    pub fn resolve(self, y: &[f64]) -> Option<f64> {
        match self {
            Truncation::Off => None,
            Truncation::Fixed(m) => Some(m),
            Truncation::Auto => {
                let m = 2.0 * y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                // a zero response needs no truncation
                (m > 0.0).then_some(m)
            }
        }
    }
}

/// After how many rounds tree structures stop being grown afresh.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "NumberOrKeyword", into = "NumberOrKeyword")]
pub enum Freeze {
    #[default]
    Off,
    After(usize),
}

impl TryFrom<NumberOrKeyword> for Freeze {
    type Error = String;
    fn try_from(v: NumberOrKeyword) -> std::result::Result<Self, String> {
        match v {
            NumberOrKeyword::Number(x) => NumberOrKeyword::as_count(x).map(Freeze::After),
            k => k.expect_keyword(&["off"]).map(|_| Freeze::Off),
        }
    }
}

impl From<Freeze> for NumberOrKeyword {
    fn from(f: Freeze) -> Self {
        match f {
            Freeze::Off => NumberOrKeyword::Keyword("off".into()),
            Freeze::After(b) => NumberOrKeyword::Number(b as f64),
        }
    }
}

/// `sign(v) * min(m, |v|)`.
#[inline]
pub fn truncate(v: f64, m: f64) -> f64 {
    v.clamp(-m, m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostParams {
    pub algo: Algo,
    pub lambda: f64,
    pub dropout_p: f64,
    pub subsample_xi: f64,
    #[serde(rename = "rounds_B", alias = "rounds")]
    pub rounds: usize,
    #[serde(rename = "trees_per_round_K", alias = "trees_per_round", default = "one")]
    pub trees_per_round: usize,
    #[serde(rename = "truncation_M", alias = "truncation", default)]
    pub truncation: Truncation,
    #[serde(default)]
    pub freeze_after: Freeze,
    pub tree: TreeParams,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl BoostParams {
    /// Defaults for `algo`. BRAT-P splits at medians, the others greedily.
    pub fn new(algo: Algo) -> Self {
        let tree = TreeParams {
            split_rule: if algo == Algo::BratP {
                SplitRule::Median
            } else {
                SplitRule::GreedyVariance
            },
            ..TreeParams::default()
        };
        BoostParams {
            algo,
            lambda: 0.8,
            dropout_p: if algo == Algo::BratD { 0.3 } else { 0.0 },
            subsample_xi: 0.8,
            rounds: 200,
            trees_per_round: if algo == Algo::BratP { 4 } else { 1 },
            truncation: Truncation::Auto,
            freeze_after: Freeze::Off,
            tree,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(BratError::param("lambda", format!("{} is outside (0, 1]", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(BratError::param(
                "dropout_p",
                format!("{} is outside [0, 1)", self.dropout_p),
            ));
        }
        if self.algo == Algo::Boulevard && self.dropout_p != 0.0 {
            return Err(BratError::param("dropout_p", "boulevard does not use dropout"));
        }
        if !(self.subsample_xi > 0.0 && self.subsample_xi <= 1.0) {
            return Err(BratError::param(
                "subsample_xi",
                format!("{} is outside (0, 1]", self.subsample_xi),
            ));
        }
        if self.rounds < 2 {
            return Err(BratError::param("rounds_B", "must be at least 2"));
        }
        if self.trees_per_round < 1 {
            return Err(BratError::param("trees_per_round_K", "must be at least 1"));
        }
        if self.algo != Algo::BratP && self.trees_per_round != 1 {
            return Err(BratError::param("trees_per_round_K", "only brat_p grows several trees per round"));
        }
        if let Truncation::Fixed(m) = self.truncation {
            if !(m > 0.0 && m.is_finite()) {
                return Err(BratError::param("truncation_M", "must be positive"));
            }
        }
        if self.freeze_after == Freeze::After(0) {
            return Err(BratError::param("freeze_after", "must be at least 1"));
        }
        self.tree.validate()
    }

    /// Keep probability of each earlier tree in the dropout residual.
    pub fn q(&self) -> f64 {
        match self.algo {
            Algo::Boulevard => 1.0,
            _ => 1.0 - self.dropout_p,
        }
    }

    pub fn rescale(&self) -> f64 {
        match self.algo {
            Algo::BratD | Algo::Boulevard => (1.0 + self.lambda * self.q()) / self.lambda,
            Algo::BratP => 1.0,
        }
    }

    /// The linear system whose solution gives this algorithm's KRR weights.
    pub fn krr_system(&self) -> KrrSystem {
        match self.algo {
            Algo::BratD | Algo::Boulevard => KrrSystem::dropout(self.lambda, self.q()),
            Algo::BratP => KrrSystem::parallel(self.trees_per_round),
        }
    }
}

/// A trained ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr")]
pub struct BratModel {
    algo: Algo,
    params: BoostParams,
    rescale: f64,
    trees: Vec<RegressionTree>,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature_scaling: Option<MinMaxScaler>,
}

#[derive(Deserialize)]
struct ModelRepr {
    algo: Algo,
    params: BoostParams,
    rescale: f64,
    trees: Vec<RegressionTree>,
    #[serde(default)]
    feature_scaling: Option<MinMaxScaler>,
}

impl TryFrom<ModelRepr> for BratModel {
    type Error = String;
    fn try_from(r: ModelRepr) -> std::result::Result<Self, String> {
        if r.algo != r.params.algo {
            return Err("algo does not match params.algo".into());
        }
        r.params.validate().map_err(|e| e.to_string())?;
        if r.rescale != r.params.rescale() {
            return Err(format!(
                "rescale {} does not match {} for {}",
                r.rescale,
                r.params.rescale(),
                r.algo
            ));
        }
        if r.trees.len() % r.params.trees_per_round != 0 {
            return Err("tree count is not a multiple of trees_per_round_K".into());
        }
        if let Some(first) = r.trees.first() {
            if r.trees
                .iter()
                .any(|t| t.train_n() != first.train_n() || t.n_features() != first.n_features())
            {
                return Err("trees disagree on training size or dimension".into());
            }
        }
        Ok(BratModel {
            algo: r.algo,
            params: r.params,
            rescale: r.rescale,
            trees: r.trees,
            feature_scaling: r.feature_scaling,
        })
    }
}

impl BratModel {
    fn new(params: BoostParams, trees: Vec<RegressionTree>) -> Self {
        BratModel {
            algo: params.algo,
            rescale: params.rescale(),
            params,
            trees,
            feature_scaling: None,
        }
    }

    pub fn algo(&self) -> Algo {
        self.algo
    }

    pub fn params(&self) -> &BoostParams {
        &self.params
    }

    pub fn rescale(&self) -> f64 {
        self.rescale
    }

    /// Trees in round-major order; BRAT-P stores `K` consecutive trees per round.
    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn n_rounds(&self) -> usize {
        self.trees.len() / self.params.trees_per_round
    }

    pub fn train_n(&self) -> usize {
        self.trees.first().map_or(0, |t| t.train_n())
    }

    pub fn n_features(&self) -> Option<usize> {
        self.trees.first().map(|t| t.n_features())
    }

    pub fn feature_scaling(&self) -> Option<&MinMaxScaler> {
        self.feature_scaling.as_ref()
    }

    pub fn set_feature_scaling(&mut self, scaler: Option<MinMaxScaler>) {
        self.feature_scaling = scaler;
    }

    /// Factor turning a sum of tree outputs into the raw ensemble prediction.
    fn sum_weight(&self) -> f64 {
        match self.algo {
            Algo::BratD | Algo::Boulevard => self.params.lambda / self.trees.len() as f64,
            Algo::BratP => 1.0 / self.n_rounds() as f64,
        }
    }

    /// Boulevard-averaged prediction, multiplied by the rescale constant
    /// when `rescaled` is set. A model without trees predicts 0.
    pub fn predict(&self, x: &[f64], rescaled: bool) -> Result<f64> {
        if self.trees.is_empty() {
            return Ok(0.0);
        }
        if let Some(d) = self.n_features() {
            if x.len() != d {
                return Err(BratError::Dimension {
                    expected: d,
                    got: x.len(),
                });
            }
        }
        let sum: f64 = self.trees.iter().map(|t| t.leaf_value(t.leaf_of(x))).sum();
        let raw = self.sum_weight() * sum;
        Ok(if rescaled { raw * self.rescale } else { raw })
    }

    pub fn predict_dataset(&self, ds: &Dataset, rescaled: bool) -> Result<Vec<f64>> {
        ds.rows().map(|x| self.predict(x, rescaled)).collect()
    }

    /// Raw predictions at the training rows, from stored leaf ids.
    pub fn training_predictions(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.train_n()];
        for t in &self.trees {
            let values = t.leaf_values();
            for (s, &l) in sum.iter_mut().zip(t.train_leaf_ids()) {
                *s += values[l as usize];
            }
        }
        if self.trees.is_empty() {
            return sum;
        }
        let w = self.sum_weight();
        sum.iter_mut().for_each(|s| *s *= w);
        sum
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub train_mse_raw: f64,
    pub train_mse_rescaled: f64,
}

pub fn train(ds: &Dataset, params: &BoostParams) -> Result<BratModel> {
    train_observed(ds, params, |_, _| {})
}

/// Trains and records the training MSE after every round.
pub fn train_with_log(ds: &Dataset, params: &BoostParams) -> Result<(BratModel, Vec<RoundLog>)> {
    let y = ds.response();
    let rescale = params.rescale();
    let mut log = Vec::with_capacity(params.rounds - 1);
    let model = train_observed(ds, params, |round, preds| {
        let n = y.len() as f64;
        let (mut raw, mut res) = (0.0, 0.0);
        for (p, v) in preds.iter().zip(y) {
            raw += (v - p).powi(2);
            res += (v - rescale * p).powi(2);
        }
        log.push(RoundLog {
            round,
            train_mse_raw: raw / n,
            train_mse_rescaled: res / n,
        });
    })?;
    Ok((model, log))
}

/// Trains, calling `observe(b, predictions)` with the raw training
/// predictions of the ensemble after each round `b = 1..B-1`.
pub fn train_observed(
    ds: &Dataset,
    params: &BoostParams,
    observe: impl FnMut(usize, &[f64]),
) -> Result<BratModel> {
    params.validate()?;
    let min_leaf = params.tree.min_leaf.resolve(ds.n(), ds.d());
    if ds.n() < min_leaf {
        return Err(BratError::Data(format!(
            "{} training rows cannot fill a leaf of minimum size {min_leaf}",
            ds.n()
        )));
    }
    match params.algo {
        Algo::BratD | Algo::Boulevard => train_dropout(ds, params, min_leaf, observe),
        Algo::BratP => {
            let order: Vec<usize> = (0..params.trees_per_round).collect();
            train_parallel(ds, params, min_leaf, &order, observe)
        }
    }
}

fn draw_subsample(rng: &mut Rng, n: usize, xi: f64, min_leaf: usize) -> Result<Vec<usize>> {
    if xi >= 1.0 {
        return Ok((0..n).collect());
    }
    let keep = Bernoulli::new(xi).map_err(|e| BratError::param("subsample_xi", e.to_string()))?;
    for _ in 0..MAX_REDRAWS {
        let g: Vec<usize> = (0..n).filter(|_| keep.sample(rng)).collect();
        if g.len() >= min_leaf.max(1) {
            return Ok(g);
        }
    }
    Err(BratError::Data(format!(
        "could not draw a subsample of at least {min_leaf} rows at rate {xi}"
    )))
}

fn train_dropout(
    ds: &Dataset,
    params: &BoostParams,
    min_leaf: usize,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<BratModel> {
    let n = ds.n();
    let y = ds.response();
    let lambda = params.lambda;
    let bound = params.truncation.resolve(y);
    let keep = Bernoulli::new(params.q()).map_err(|e| BratError::param("dropout_p", e.to_string()))?;
    let mut rng = child_rng(params.seed, &[]);

    let n_trees = params.rounds - 1;
    let mut trees: Vec<RegressionTree> = Vec::with_capacity(n_trees);
    // training predictions of tree s at rows (s-1)*n..s*n
    let mut tree_preds: Vec<f64> = Vec::with_capacity(n_trees * n);
    let mut total = vec![0.0; n];
    let mut dropped = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut current = vec![0.0; n];

    for b in 1..=n_trees {
        dropped.iter_mut().for_each(|v| *v = 0.0);
        // index 0 is the zero tree: its draw is consumed but adds nothing
        keep.sample(&mut rng);
        for s in 1..b {
            if keep.sample(&mut rng) {
                let p = &tree_preds[(s - 1) * n..s * n];
                for (acc, v) in dropped.iter_mut().zip(p) {
                    *acc += v;
                }
            }
        }
        let w = lambda / b as f64;
        for i in 0..n {
            let partial = w * dropped[i];
            let partial = bound.map_or(partial, |m| truncate(partial, m));
            z[i] = y[i] - partial;
        }
        let sub = draw_subsample(&mut rng, n, params.subsample_xi, min_leaf)?;
        let tree = match params.freeze_after {
            Freeze::After(b0) if b > b0 => {
                let pick = rng.random_range(0..b0);
                trees[pick].clone_structure_refit(ds, &z, &sub)?
            }
            _ => fit_tree(ds, &z, &sub, &params.tree)?,
        };
        let preds = tree.training_predictions();
        for ((t, c), p) in total.iter_mut().zip(current.iter_mut()).zip(&preds) {
            *t += p;
            *c = w * *t;
        }
        tree_preds.extend_from_slice(&preds);
        trees.push(tree);
        observe(b, &current);
    }
    Ok(BratModel::new(params.clone(), trees))
}

/// BRAT-P. `order` is the sequence in which the columns of a round are
/// fitted; the result does not depend on it.
fn train_parallel(
    ds: &Dataset,
    params: &BoostParams,
    min_leaf: usize,
    order: &[usize],
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<BratModel> {
    let n = ds.n();
    let y = ds.response();
    let k_cols = params.trees_per_round;
    let n_rounds = params.rounds - 1;
    let bound = params.truncation.resolve(y);
    let mut trees: Vec<RegressionTree> = Vec::with_capacity(n_rounds * k_cols);
    // per-column sums of training predictions over completed rounds
    let mut colsum = vec![vec![0.0; n]; k_cols];
    let mut current = vec![0.0; n];

    // warm start: K plain boosting steps with unit learning rate
    let mut fitted = vec![0.0; n];
    for (k, col) in colsum.iter_mut().enumerate() {
        let mut rng = child_rng(params.seed, &[1, k as u64]);
        let z: Vec<f64> = y.iter().zip(&fitted).map(|(v, f)| v - f).collect();
        let sub = draw_subsample(&mut rng, n, params.subsample_xi, min_leaf)?;
        let tree = fit_tree(ds, &z, &sub, &params.tree)?;
        let preds = tree.training_predictions();
        for ((f, c), p) in fitted.iter_mut().zip(col.iter_mut()).zip(&preds) {
            *f += p;
            *c = *p;
        }
        trees.push(tree);
    }
    observe(1, &fitted);

    for b in 2..=n_rounds {
        let done = (b - 1) as f64;
        let capped: Vec<Vec<f64>> = colsum
            .iter()
            .map(|col| {
                col.iter()
                    .map(|v| {
                        let avg = v / done;
                        bound.map_or(avg, |m| truncate(avg, m))
                    })
                    .collect()
            })
            .collect();
        let all: Vec<f64> = (0..n).map(|i| capped.iter().map(|c| c[i]).sum()).collect();
        let pool = match params.freeze_after {
            Freeze::After(b0) if b > b0 => Some(&trees[..b0 * k_cols]),
            _ => None,
        };
        let mut fits: Vec<(usize, Result<RegressionTree>)> = order
            .par_iter()
            .map(|&k| {
                let mut rng = child_rng(params.seed, &[b as u64, k as u64]);
                let z: Vec<f64> = (0..n).map(|i| y[i] - (all[i] - capped[k][i])).collect();
                let fit = draw_subsample(&mut rng, n, params.subsample_xi, min_leaf).and_then(|sub| {
                    match pool {
                        Some(pool) => {
                            let pick = rng.random_range(0..pool.len());
                            pool[pick].clone_structure_refit(ds, &z, &sub)
                        }
                        None => fit_tree(ds, &z, &sub, &params.tree),
                    }
                });
                (k, fit)
            })
            .collect();
        fits.sort_by_key(|(k, _)| *k);
        for (k, fit) in fits {
            let tree = fit?;
            for (c, p) in colsum[k].iter_mut().zip(tree.training_predictions()) {
                *c += p;
            }
            trees.push(tree);
        }
        let inv = 1.0 / b as f64;
        for (i, c) in current.iter_mut().enumerate() {
            *c = inv * colsum.iter().map(|col| col[i]).sum::<f64>();
        }
        observe(b, &current);
    }
    Ok(BratModel::new(params.clone(), trees))
}

/// Closed-form limit of the training predictions for a structure matrix
/// `kbar`: `(λ⁻¹I + qK̄)⁻¹K̄y` for the dropout family and
/// `(I + (K−1)K̄)⁻¹ K K̄y` for BRAT-P.
pub fn fixed_point_oracle(kbar: &DMatrix<f64>, y: &[f64], system: KrrSystem) -> Result<DVector<f64>> {
    let n = kbar.nrows();
    if kbar.ncols() != n || y.len() != n {
        return Err(BratError::Data("oracle needs a square matrix matching y".into()));
    }
    for i in 0..n {
        let row = kbar.row(i);
        if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(BratError::Data(format!("row {i} has entries outside [0, 1]")));
        }
        if row.sum() > 1.0 + 1e-8 {
            return Err(BratError::Data(format!("row {i} sums to more than 1")));
        }
    }
    let rhs = kbar * DVector::from_column_slice(y) * system.scale;
    system.solve(kbar, &rhs)
}
