//! Simulation scenarios: fixed-point convergence, normality of predictions,
//! interval coverage, variable-importance size and power, signal recovery
//! and an MSE race between the training algorithms.
//!
//! Every scenario returns CSV tables and a JSON summary computed from
//! exactly the values written to those tables. Repetitions run on the rayon
//! pool; repetition `r` draws its data and models from seed `seed + r`.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::boost::{fixed_point_oracle, train, train_observed, Algo, BoostParams, BratModel, Freeze};
use crate::data::{friedman, gen_friedman, gen_sine_quadratic, gen_vi, sine_quadratic, Dataset};
use crate::error::{BratError, Result};
use crate::infer::{calibrate_widths, estimate_sigma, variable_importance_test, Inference, IntervalKind};
use crate::kernel::KernelOptions;
use crate::rng::rng_from_seed;
use crate::stats::ks_test_normal;
use crate::tree::{MinLeaf, SplitRule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    FixedPoint,
    Normality,
    Coverage,
    ViPower,
    SignalRecovery,
    MseRace,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::FixedPoint,
        Scenario::Normality,
        Scenario::Coverage,
        Scenario::ViPower,
        Scenario::SignalRecovery,
        Scenario::MseRace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::FixedPoint => "fixed-point",
            Scenario::Normality => "normality",
            Scenario::Coverage => "coverage",
            Scenario::ViPower => "vi-power",
            Scenario::SignalRecovery => "signal-recovery",
            Scenario::MseRace => "mse-race",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = BratError;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Scenario::ALL.iter().map(|s| s.name()).collect();
                BratError::param("scenario", format!("unknown scenario `{s}`, expected one of {names:?}"))
            })
    }
}

/// A CSV table. Numbers are written in shortest round-trip form.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub file: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(file: &str, columns: &[&str]) -> Self {
        Table {
            file: file.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join(&self.file))?;
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioOutput {
    pub scenario: Scenario,
    pub tables: Vec<Table>,
    pub summary: Value,
}

impl ScenarioOutput {
    /// Writes every table plus `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for t in &self.tables {
            t.write(dir)?;
        }
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)? + "\n")?;
        Ok(())
    }

    pub fn summary_f64(&self, path: &[&str]) -> Option<f64> {
        path.iter().try_fold(&self.summary, |v, k| v.get(k))?.as_f64()
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scenario overrides accepted from a run configuration. Unset fields take
/// the scenario's own defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    #[serde(default)]
    pub seed: u64,
    pub reps: Option<usize>,
    pub n: Option<usize>,
    pub rounds: Option<usize>,
    pub algo: Option<Algo>,
    pub alpha: Option<f64>,
    pub sigma: Option<f64>,
}

pub fn run(scenario: Scenario, settings: &SimSettings) -> Result<ScenarioOutput> {
    let s = settings;
    match scenario {
        Scenario::FixedPoint => {
            let mut c = FixedPointConfig::new(s.algo.unwrap_or(Algo::BratD));
            c.seed = s.seed;
            c.n = s.n.unwrap_or(c.n);
            c.rounds = s.rounds.unwrap_or(c.rounds);
            c.sigma = s.sigma.unwrap_or(c.sigma);
            c.checkpoint = c.checkpoint.min(c.rounds - 1);
            fixed_point(&c)
        }
        Scenario::Normality => {
            let mut c = NormalityConfig::default();
            c.seed = s.seed;
            c.reps = s.reps.unwrap_or(c.reps);
            c.n = s.n.unwrap_or(c.n);
            c.params.rounds = s.rounds.unwrap_or(c.params.rounds);
            c.sigma = s.sigma.unwrap_or(c.sigma);
            if let Some(a) = s.algo {
                c.params = retarget(&c.params, a);
            }
            normality(&c)
        }
        Scenario::Coverage => {
            let mut c = CoverageConfig::default();
            c.seed = s.seed;
            c.reps = s.reps.unwrap_or(c.reps);
            c.n_train = s.n.unwrap_or(c.n_train);
            c.params.rounds = s.rounds.unwrap_or(c.params.rounds);
            c.alpha = s.alpha.unwrap_or(c.alpha);
            c.sigma = s.sigma.unwrap_or(c.sigma);
            if let Some(a) = s.algo {
                c.params = retarget(&c.params, a);
            }
            coverage(&c)
        }
        Scenario::ViPower => {
            let mut c = ViPowerConfig::default();
            c.seed = s.seed;
            c.reps = s.reps.unwrap_or(c.reps);
            c.n = s.n.unwrap_or(c.n);
            c.params.rounds = s.rounds.unwrap_or(c.params.rounds);
            c.alpha = s.alpha.unwrap_or(c.alpha);
            c.sigma = s.sigma.unwrap_or(c.sigma);
            if let Some(a) = s.algo {
                c.params = retarget(&c.params, a);
            }
            vi_power(&c)
        }
        Scenario::SignalRecovery => {
            let mut c = SignalRecoveryConfig::default();
            c.seed = s.seed;
            c.n = s.n.unwrap_or(c.n);
            c.rounds = s.rounds.unwrap_or(c.rounds);
            signal_recovery(&c)
        }
        Scenario::MseRace => {
            let mut c = MseRaceConfig::default();
            c.seed = s.seed;
            c.n_train = s.n.unwrap_or(c.n_train);
            c.rounds = s.rounds.unwrap_or(c.rounds);
            c.sigma = s.sigma.unwrap_or(c.sigma);
            mse_race(&c)
        }
    }
}

/// Same hyperparameters under another algorithm, with that algorithm's
/// conventions for dropout, columns and split rule.
fn retarget(p: &BoostParams, algo: Algo) -> BoostParams {
    let base = BoostParams::new(algo);
    BoostParams {
        algo,
        dropout_p: if algo == Algo::BratD { p.dropout_p } else { 0.0 },
        trees_per_round: base.trees_per_round,
        tree: crate::tree::TreeParams {
            split_rule: base.tree.split_rule,
            ..p.tree.clone()
        },
        ..p.clone()
    }
}

// ---------------------------------------------------------------- fixed point

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointConfig {
    pub params: BoostParams,
    pub n: usize,
    pub sigma: f64,
    pub rounds: usize,
    /// Round at which the intermediate gap is reported.
    pub checkpoint: usize,
    pub seed: u64,
}

impl FixedPointConfig {
    pub fn new(algo: Algo) -> Self {
        let mut params = BoostParams::new(algo);
        params.lambda = 0.8;
        params.dropout_p = if algo == Algo::BratD { 0.3 } else { 0.0 };
        params.subsample_xi = 0.8;
        params.freeze_after = Freeze::After(20);
        params.trees_per_round = if algo == Algo::BratP { 4 } else { 1 };
        params.tree.max_depth = 3;
        FixedPointConfig {
            params,
            n: 100,
            sigma: 0.3,
            rounds: 20_000,
            checkpoint: 2_000,
            seed: 0,
        }
    }
}

/// Expected structure matrix of a frozen pool: a structure with a leaf of
/// `m` training points contributes `(1 − (1 − ξ)^m)/m` to every pair in
/// that leaf, the subsample expectation of `1(j ∈ G)/|G ∩ leaf|`.
pub fn pool_expected_kernel(pool: &[crate::tree::RegressionTree], xi: f64) -> Result<DMatrix<f64>> {
    let n = pool.first().map_or(0, |t| t.train_n());
    if n == 0 {
        return Err(BratError::Data("empty structure pool".into()));
    }
    let mut k = DMatrix::zeros(n, n);
    for tree in pool {
        let ids = tree.train_leaf_ids();
        let mut size = vec![0usize; tree.n_leaves()];
        for &l in ids {
            size[l as usize] += 1;
        }
        for i in 0..n {
            for j in 0..n {
                if ids[i] == ids[j] {
                    let m = size[ids[i] as usize] as f64;
                    k[(i, j)] += (1.0 - (1.0 - xi).powf(m)) / m;
                }
            }
        }
    }
    Ok(k / pool.len() as f64)
}

pub fn fixed_point(c: &FixedPointConfig) -> Result<ScenarioOutput> {
    let start = Instant::now();
    let ds = gen_sine_quadratic(c.n, c.sigma, c.seed)?;
    let mut params = c.params.clone();
    params.rounds = c.rounds;
    params.seed = c.seed;
    let b0 = match params.freeze_after {
        Freeze::After(b0) => b0,
        Freeze::Off => return Err(BratError::param("freeze_after", "the fixed-point scenario needs a frozen pool")),
    };
    let n = ds.n();
    let mut history: Vec<f64> = Vec::with_capacity((c.rounds - 1) * n);
    let model = train_observed(&ds, &params, |_, preds| history.extend_from_slice(preds))?;
    let pool = &model.trees()[..b0 * params.trees_per_round];
    let kbar = pool_expected_kernel(pool, params.subsample_xi)?;
    let oracle = fixed_point_oracle(&kbar, ds.response(), params.krr_system())?;

    let mut table = Table::new("fixed_point.csv", &["round", "sup_gap"]);
    let mut gaps = Vec::with_capacity(c.rounds - 1);
    for (b, preds) in history.chunks(n).enumerate() {
        let gap = preds
            .iter()
            .zip(oracle.iter())
            .fold(0.0f64, |g, (p, o)| g.max((p - o).abs()));
        gaps.push(gap);
        table.push(vec![(b + 1).to_string(), num(gap)]);
    }
    let y = ds.response();
    let range = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - y.iter().cloned().fold(f64::INFINITY, f64::min);
    let final_gap = *gaps.last().unwrap();
    let checkpoint_gap = gaps[c.checkpoint - 1];
    let summary = json!({
        "scenario": "fixed-point",
        "algo": params.algo,
        "n": n,
        "rounds_B": c.rounds,
        "freeze_after": b0,
        "checkpoint_round": c.checkpoint,
        "checkpoint_gap": checkpoint_gap,
        "final_gap": final_gap,
        "range_y": range,
        "relative_final_gap": final_gap / range,
        "runtime_s": start.elapsed().as_secs_f64(),
    });
    Ok(ScenarioOutput {
        scenario: Scenario::FixedPoint,
        tables: vec![table],
        summary,
    })
}

// ------------------------------------------------------------------ normality

#[derive(Clone, Debug, PartialEq)]
pub struct NormalityConfig {
    pub params: BoostParams,
    pub reps: usize,
    pub n: usize,
    pub n_calib: usize,
    pub sigma: f64,
    pub x0: f64,
    pub seed: u64,
}

impl Default for NormalityConfig {
    fn default() -> Self {
        let mut params = BoostParams::new(Algo::BratD);
        params.lambda = 0.8;
        params.dropout_p = 0.3;
        params.subsample_xi = 0.8;
        params.rounds = 300;
        // greedy splits chase the noise and widen the spread of the
        // standardized prediction well past 1
        params.tree.split_rule = SplitRule::Median;
        params.tree.max_depth = 5;
        NormalityConfig {
            params,
            reps: 200,
            n: 500,
            n_calib: 250,
            sigma: 1.0,
            x0: 0.5,
            seed: 0,
        }
    }
}

pub fn normality(c: &NormalityConfig) -> Result<ScenarioOutput> {
    let start = Instant::now();
    let truth = sine_quadratic(c.x0);
    let reps: Vec<(f64, f64, f64, f64)> = (0..c.reps)
        .into_par_iter()
        .map(|rep| {
            let seed = c.seed + rep as u64;
            let train_ds = gen_sine_quadratic(c.n, c.sigma, seed)?;
            let calib = gen_sine_quadratic(c.n_calib, c.sigma, seed ^ 0x5eed_0000_0000)?;
            let mut p = c.params.clone();
            p.seed = seed;
            let model = train(&train_ds, &p)?;
            let sigma = estimate_sigma(&model, &calib)?.sigma_hat;
            let engine = Inference::exact(&model, &KernelOptions::default())?;
            let pt = engine.point(&[c.x0])?;
            let z = (pt.prediction - truth) / (model.rescale() * sigma * pt.r_norm);
            Ok((pt.prediction, sigma, pt.r_norm, z))
        })
        .collect::<Result<_>>()?;

    let mut table = Table::new(
        "normality.csv",
        &["rep", "prediction", "truth", "sigma_hat", "r_norm", "std_error"],
    );
    for (rep, &(pred, sigma, r, z)) in reps.iter().enumerate() {
        table.push(vec![rep.to_string(), num(pred), num(truth), num(sigma), num(r), num(z)]);
    }
    let z: Vec<f64> = reps.iter().map(|r| r.3).collect();
    let ks = ks_test_normal(&z)?;
    let m = mean(&z);
    let sd = (z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (z.len() as f64 - 1.0).max(1.0)).sqrt();
    let summary = json!({
        "scenario": "normality",
        "algo": c.params.algo,
        "reps": c.reps,
        "n": c.n,
        "x0": c.x0,
        "mean_std_error": m,
        "sd_std_error": sd,
        "ks_statistic": ks.statistic,
        "ks_p_value": ks.p_value,
        "runtime_s": start.elapsed().as_secs_f64(),
    });
    Ok(ScenarioOutput {
        scenario: Scenario::Normality,
        tables: vec![table],
        summary,
    })
}

// ------------------------------------------------------------------- coverage

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageConfig {
    pub params: BoostParams,
    pub reps: usize,
    pub n_train: usize,
    pub n_calib: usize,
    pub n_test: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        let mut params = BoostParams::new(Algo::BratD);
        params.lambda = 0.6;
        params.dropout_p = 0.3;
        params.subsample_xi = 0.8;
        params.rounds = 201;
        params.tree.max_depth = 4;
        CoverageConfig {
            params,
            reps: 30,
            n_train: 1000,
            n_calib: 500,
            n_test: 200,
            sigma: 1.0,
            alpha: 0.1,
            seed: 0,
        }
    }
}

struct CoverageRow {
    point: usize,
    kind: IntervalKind,
    covered: bool,
    lower: f64,
    upper: f64,
    target: f64,
    gamma: f64,
}

pub fn coverage(c: &CoverageConfig) -> Result<ScenarioOutput> {
    let start = Instant::now();
    // test features are shared by every repetition
    let test_x = gen_friedman(c.n_test, 0.0, c.seed ^ 0x7e57)?;
    let per_rep: Vec<Vec<CoverageRow>> = (0..c.reps)
        .into_par_iter()
        .map(|rep| coverage_rep(c, &test_x, c.seed + rep as u64))
        .collect::<Result<_>>()?;

    let mut table = Table::new(
        "coverage.csv",
        &["rep", "point_id", "kind", "covered", "width", "lower", "upper", "target", "gamma"],
    );
    let mut stats: Map<String, Value> = Map::new();
    for kind in IntervalKind::ALL {
        let mut covered = Vec::new();
        let mut widths = Vec::new();
        for (rep, rows) in per_rep.iter().enumerate() {
            for r in rows.iter().filter(|r| r.kind == kind) {
                let width = r.upper - r.lower;
                table.push(vec![
                    rep.to_string(),
                    r.point.to_string(),
                    kind.to_string(),
                    (r.covered as u8).to_string(),
                    num(width),
                    num(r.lower),
                    num(r.upper),
                    num(r.target),
                    num(r.gamma),
                ]);
                covered.push(r.covered as u8 as f64);
                widths.push(width);
            }
        }
        stats.insert(
            kind.to_string(),
            json!({ "coverage": mean(&covered), "mean_width": mean(&widths), "rows": covered.len() }),
        );
    }
    let summary = json!({
        "scenario": "coverage",
        "algo": c.params.algo,
        "reps": c.reps,
        "n_test": c.n_test,
        "alpha": c.alpha,
        "kinds": stats,
        "runtime_s": start.elapsed().as_secs_f64(),
    });
    Ok(ScenarioOutput {
        scenario: Scenario::Coverage,
        tables: vec![table],
        summary,
    })
}

fn coverage_rep(c: &CoverageConfig, test_x: &Dataset, seed: u64) -> Result<Vec<CoverageRow>> {
    let train_ds = gen_friedman(c.n_train, c.sigma, seed)?;
    let calib = gen_friedman(c.n_calib, c.sigma, seed ^ 0xca11b)?;
    let twin_ds = gen_friedman(c.n_train, c.sigma, seed ^ 0x7714)?;
    let mut p = c.params.clone();
    p.seed = seed;
    let model = train(&train_ds, &p)?;
    p.seed = seed ^ 0x7714;
    let twin = train(&twin_ds, &p)?;

    let sigma = estimate_sigma(&model, &calib)?.sigma_hat;
    let engine = Inference::exact(&model, &KernelOptions::default())?;
    let gamma_pi = calibrate_widths(&engine, &calib, c.alpha, IntervalKind::Pi, sigma)?;
    let points = engine.points(test_x)?;

    let mut noise_rng = rng_from_seed(seed ^ 0x0b5e);
    let normal = rand_distr::Normal::new(0.0, c.sigma).map_err(|e| BratError::param("sigma", e.to_string()))?;
    let mut rows = Vec::with_capacity(3 * test_x.n());
    for (i, (x, pt)) in test_x.rows().zip(&points).enumerate() {
        let f = friedman(x);
        let y_new = f + rand_distr::Distribution::sample(&normal, &mut noise_rng);
        let twin_pred = twin.predict(x, true)?;
        for kind in IntervalKind::ALL {
            let (gamma, target) = match kind {
                IntervalKind::Ci => (1.0, f),
                IntervalKind::Pi => (gamma_pi, y_new),
                IntervalKind::Ri => (1.0, twin_pred),
            };
            let iv = crate::infer::intervals::interval(
                kind,
                pt.prediction,
                pt.r_norm,
                sigma,
                c.alpha,
                gamma,
                model.rescale(),
            )?;
            rows.push(CoverageRow {
                point: i,
                kind,
                covered: iv.contains(target),
                lower: iv.lower(),
                upper: iv.upper(),
                target,
                gamma,
            });
        }
    }
    Ok(rows)
}

// ------------------------------------------------------------------- vi power

#[derive(Clone, Debug, PartialEq)]
pub struct ViPowerConfig {
    pub params: BoostParams,
    pub reps: usize,
    pub n: usize,
    pub holdout: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub strengths: Vec<f64>,
    pub seed: u64,
}

impl Default for ViPowerConfig {
    fn default() -> Self {
        let mut params = BoostParams::new(Algo::BratD);
        params.lambda = 1.0;
        params.dropout_p = 0.95;
        params.subsample_xi = 0.9;
        params.rounds = 101;
        // the null distribution needs structures that stop looking at y;
        // deep median trees keep the bias gap between the two models small
        params.freeze_after = Freeze::After(20);
        params.tree.split_rule = SplitRule::Median;
        params.tree.max_depth = 10;
        params.tree.min_leaf = MinLeaf::Fixed(1);
        ViPowerConfig {
            params,
            reps: 50,
            n: 1000,
            holdout: 20,
            sigma: 0.5,
            alpha: 0.05,
            strengths: vec![0.0, 2.0],
            seed: 0,
        }
    }
}

pub fn vi_power(c: &ViPowerConfig) -> Result<ScenarioOutput> {
    let start = Instant::now();
    let jobs: Vec<(f64, usize)> = c
        .strengths
        .iter()
        .flat_map(|&w| (0..c.reps).map(move |r| (w, r)))
        .collect();
    let results: Vec<crate::infer::ViTestResult> = jobs
        .par_iter()
        .map(|&(w, rep)| {
            let seed = c.seed + rep as u64;
            let (full, _) = gen_vi(c.n, c.sigma, w, seed)?;
            let (hold, _) = gen_vi(c.holdout, c.sigma, w, seed ^ 0x401d)?;
            let mut p = c.params.clone();
            p.seed = seed;
            variable_importance_test(&full, &[0, 1], &hold, &p, c.alpha, None)
        })
        .collect::<Result<_>>()?;

    let mut table = Table::new(
        "vi_power.csv",
        &["w", "rep", "statistic", "dof", "p_value", "reject", "jitter_used"],
    );
    let mut rates = Map::new();
    for &w in &c.strengths {
        let mut rejects = Vec::new();
        for (&(jw, rep), r) in jobs.iter().zip(&results) {
            if jw != w {
                continue;
            }
            table.push(vec![
                num(w),
                rep.to_string(),
                num(r.statistic),
                r.dof.to_string(),
                num(r.p_value),
                (r.reject as u8).to_string(),
                num(r.jitter_used),
            ]);
            rejects.push(r.reject as u8 as f64);
        }
        rates.insert(num(w), json!(mean(&rejects)));
    }
    let summary = json!({
        "scenario": "vi-power",
        "algo": c.params.algo,
        "reps": c.reps,
        "n": c.n,
        "holdout": c.holdout,
        "alpha": c.alpha,
        "rejection_rate": rates,
        "runtime_s": start.elapsed().as_secs_f64(),
    });
    Ok(ScenarioOutput {
        scenario: Scenario::ViPower,
        tables: vec![table],
        summary,
    })
}

// ------------------------------------------------------------ signal recovery

#[derive(Clone, Debug, PartialEq)]
pub struct SignalRecoveryConfig {
    pub n: usize,
    pub level: f64,
    pub rounds: usize,
    pub dropout_p: f64,
    pub trees_per_round: usize,
    pub seed: u64,
}

impl Default for SignalRecoveryConfig {
    fn default() -> Self {
        SignalRecoveryConfig {
            n: 100,
            level: 3.0,
            rounds: 2000,
            dropout_p: 0.5,
            trees_per_round: 3,
            seed: 0,
        }
    }
}

/// Expected raw and rescaled training predictions for a constant response.
pub fn signal_recovery_targets(p: &BoostParams, level: f64) -> (f64, f64) {
    let raw = match p.algo {
        Algo::BratP => level,
        _ => p.lambda / (1.0 + p.lambda * p.q()) * level,
    };
    (raw, raw * p.rescale())
}

pub fn signal_recovery(c: &SignalRecoveryConfig) -> Result<ScenarioOutput> {
    let start = Instant::now();
    let base = gen_sine_quadratic(c.n, 0.0, c.seed)?;
    let ds = base.with_response(vec![c.level; c.n])?;
    let mut table = Table::new(
        "signal_recovery.csv",
        &["algo", "point_id", "raw", "rescaled", "expected_raw", "expected_rescaled"],
    );
    let mut per_algo = Map::new();
    for algo in [Algo::Boulevard, Algo::BratD, Algo::BratP] {
        let mut p = BoostParams::new(algo);
        p.lambda = 1.0;
        p.rounds = c.rounds;
        p.seed = c.seed;
        p.dropout_p = if algo == Algo::BratD { c.dropout_p } else { 0.0 };
        p.trees_per_round = if algo == Algo::BratP { c.trees_per_round } else { 1 };
        p.tree.min_leaf = MinLeaf::Auto;
        p.tree.split_rule = if algo == Algo::BratP { SplitRule::Median } else { SplitRule::GreedyVariance };
        let model = train(&ds, &p)?;
        let (er, es) = signal_recovery_targets(&p, c.level);
        let raw = model.training_predictions();
        let mut dev_raw: f64 = 0.0;
        let mut dev_res: f64 = 0.0;
        for (i, &r) in raw.iter().enumerate() {
            let s = r * model.rescale();
            dev_raw = dev_raw.max((r - er).abs());
            dev_res = dev_res.max((s - es).abs());
            table.push(vec![algo.to_string(), i.to_string(), num(r), num(s), num(er), num(es)]);
        }
        let rescaled: Vec<f64> = raw.iter().map(|r| r * model.rescale()).collect();
        per_algo.insert(
            algo.to_string(),
            json!({
                "mean_raw": mean(&raw),
                "mean_rescaled": mean(&rescaled),
                "expected_raw": er,
                "expected_rescaled": es,
                "max_abs_dev_raw": dev_raw,
                "max_abs_dev_rescaled": dev_res,
            }),
        );
    }
    let summary = json!({
        "scenario": "signal-recovery",
        "level": c.level,
        "rounds_B": c.rounds,
        "algos": per_algo,
        "runtime_s": start.elapsed().as_secs_f64(),
    });
    Ok(ScenarioOutput {
        scenario: Scenario::SignalRecovery,
        tables: vec![table],
        summary,
    })
}

// ------------------------------------------------------------------- mse race

#[derive(Clone, Debug, PartialEq)]
pub struct MseRaceConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub sigma: f64,
    pub rounds: usize,
    pub every: usize,
    pub seed: u64,
}

impl Default for MseRaceConfig {
    fn default() -> Self {
        MseRaceConfig {
            n_train: 1000,
            n_test: 500,
            sigma: 1.0,
            rounds: 301,
            every: 10,
            seed: 0,
        }
    }
}

/// Rescaled test predictions of the ensemble truncated after each round.
fn prediction_path(model: &BratModel, test: &Dataset) -> Vec<Vec<f64>> {
    let k = model.params().trees_per_round;
    let mut sum = vec![0.0; test.n()];
    let mut path = Vec::with_capacity(model.n_rounds());
    for (b, round) in model.trees().chunks(k).enumerate() {
        for t in round {
            for (s, x) in sum.iter_mut().zip(test.rows()) {
                *s += t.leaf_value(t.leaf_of(x));
            }
        }
        let b = (b + 1) as f64;
        let w = match model.algo() {
            Algo::BratP => 1.0 / b,
            _ => model.params().lambda / b,
        } * model.rescale();
        path.push(sum.iter().map(|s| s * w).collect());
    }
    path
}

pub fn mse_race(c: &MseRaceConfig) -> Result<ScenarioOutput> {
    let start = Instant::now();
    let train_ds = gen_friedman(c.n_train, c.sigma, c.seed)?;
    let test = gen_friedman(c.n_test, 0.0, c.seed ^ 0x7e57)?;
    let mut table = Table::new("mse_race.csv", &["algo", "round", "test_mse"]);
    let mut finals = Map::new();
    for algo in [Algo::BratD, Algo::BratP, Algo::Boulevard] {
        let mut p = BoostParams::new(algo);
        p.rounds = c.rounds;
        p.seed = c.seed;
        let model = train(&train_ds, &p)?;
        let path = prediction_path(&model, &test);
        let mut last = f64::NAN;
        for (b, preds) in path.iter().enumerate() {
            let round = b + 1;
            if round % c.every != 0 && round != path.len() {
                continue;
            }
            let mse = mean(
                &preds
                    .iter()
                    .zip(test.response())
                    .map(|(p, y)| (p - y).powi(2))
                    .collect::<Vec<_>>(),
            );
            table.push(vec![algo.to_string(), round.to_string(), num(mse)]);
            last = mse;
        }
        finals.insert(algo.to_string(), json!(last));
    }
    let summary = json!({
        "scenario": "mse-race",
        "rounds_B": c.rounds,
        "final_test_mse": finals,
        "runtime_s": start.elapsed().as_secs_f64(),
    });
    Ok(ScenarioOutput {
        scenario: Scenario::MseRace,
        tables: vec![table],
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("bogus".parse::<Scenario>().is_err());
    }

    #[test]
    fn pool_kernel_single_leaf() {
        let ds = gen_sine_quadratic(4, 0.0, 0).unwrap();
        let flat = ds.with_response(vec![1.0; 4]).unwrap();
        let params = crate::tree::TreeParams::default();
        let t = crate::tree::fit_tree(&flat, flat.response(), &[0, 1, 2, 3], &params).unwrap();
        let k = pool_expected_kernel(&[t], 0.5).unwrap();
        let v = (1.0 - 0.5f64.powi(4)) / 4.0;
        assert!(k.iter().all(|&e| (e - v).abs() < 1e-15));
    }

    #[test]
    fn small_coverage_run_has_expected_rows() {
        let mut c = CoverageConfig::default();
        c.reps = 2;
        c.n_train = 150;
        c.n_calib = 40;
        c.n_test = 7;
        c.params.rounds = 15;
        let out = coverage(&c).unwrap();
        assert_eq!(out.tables[0].rows.len(), 2 * 7 * 3);
        let cov = out.summary_f64(&["kinds", "pi", "coverage"]).unwrap();
        assert!((0.0..=1.0).contains(&cov));
    }

    #[test]
    fn mse_path_ends_at_model_prediction() {
        let ds = gen_friedman(80, 1.0, 1).unwrap();
        let test = gen_friedman(5, 0.0, 2).unwrap();
        for algo in [Algo::BratD, Algo::BratP] {
            let mut p = BoostParams::new(algo);
            p.rounds = 12;
            let model = train(&ds, &p).unwrap();
            let path = prediction_path(&model, &test);
            let direct = model.predict_dataset(&test, true).unwrap();
            for (a, b) in path.last().unwrap().iter().zip(direct) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
