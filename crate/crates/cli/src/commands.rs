use std::fs;
use std::path::{Path, PathBuf};

use brat::data::{load_csv, split, write_csv, Dataset, MinMaxScaler};
use brat::infer::{calibrate_widths, estimate_sigma, intervals, Inference, IntervalKind, SketchOptions, ViSketch};
use brat::kernel::KernelOptions;
use brat::sim::{self, Scenario};
use brat::{train_with_log, variable_importance_test, BratModel};
use serde_json::{json, Value};

use crate::config::{resolve_params, RunConfig};
use crate::{CliError, Command, CommonArgs, DataArgs, IntervalArgs, ParamArgs, SketchArgs};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { common, params, data } => train_cmd(&common, &params, &data),
        Command::Predict { common, data } => predict_cmd(&common, &data),
        Command::Intervals {
            common,
            data,
            intervals,
            sketch,
        } => intervals_cmd(&common, &data, &intervals, &sketch),
        Command::Importance {
            common,
            params,
            data,
            drop,
            alpha,
            sketch,
        } => importance_cmd(&common, &params, &data, drop, alpha, &sketch),
        Command::Sim {
            common,
            scenario,
            reps,
            n,
            rounds,
            algo,
            alpha,
            sigma,
            seed,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let scenario: Scenario = match scenario {
                Some(s) => s.parse()?,
                None => cfg
                    .scenario
                    .ok_or_else(|| CliError::Config("a scenario is required (--scenario)".into()))?,
            };
            let mut settings = cfg.sim.clone();
            settings.seed = seed.unwrap_or(settings.seed);
            settings.reps = reps.or(settings.reps);
            settings.n = n.or(settings.n);
            settings.rounds = rounds.or(settings.rounds);
            settings.algo = algo.or(settings.algo);
            settings.alpha = alpha.or(settings.alpha);
            settings.sigma = sigma.or(settings.sigma);
            let out = sim::run(scenario, &settings)?;
            out.write(&out_dir(&common, &cfg)?)?;
            Ok(())
        }
    }
}

fn out_dir(common: &CommonArgs, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(brat::BratError::from)?;
    Ok(dir)
}

fn model_path(common: &CommonArgs, cfg: &RunConfig) -> Result<PathBuf> {
    match common.model.clone().or_else(|| cfg.model.clone()) {
        Some(p) => Ok(p),
        None => Ok(out_dir(common, cfg)?.join("model.json")),
    }
}

fn pick(flag: &Option<PathBuf>, cfg: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.clone())
        .ok_or_else(|| CliError::Config(format!("data.{name} is required (--{name})")))
}

fn target<'a>(data: &'a DataArgs, cfg: &'a RunConfig) -> &'a str {
    data.target.as_deref().unwrap_or_else(|| cfg.target())
}

/// Loads a file, applying the model's feature scaling when it has one.
fn load_for(model: &BratModel, path: &Path, target: &str) -> Result<Dataset> {
    let ds = load_csv(path, target, false)?;
    Ok(match model.feature_scaling() {
        Some(s) => ds.scaled(s)?,
        None => ds,
    })
}

fn load_model(path: &Path) -> Result<BratModel> {
    let text = fs::read_to_string(path)
        .map_err(|e| brat::BratError::Data(format!("cannot read model {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| brat::BratError::Data(format!("model {}: {e}", path.display())).into())
}

fn number_or_keyword(s: &str) -> Value {
    if let Ok(v) = s.parse::<u64>() {
        json!(v)
    } else if let Ok(v) = s.parse::<f64>() {
        json!(v)
    } else {
        json!(s)
    }
}

fn params_patch(p: &ParamArgs) -> Value {
    let mut v = json!({});
    let mut tree = json!({});
    let set = |obj: &mut Value, k: &str, val: Option<Value>| {
        if let Some(val) = val {
            obj[k] = val;
        }
    };
    set(&mut v, "lambda", p.lambda.map(|x| json!(x)));
    set(&mut v, "dropout_p", p.dropout_p.map(|x| json!(x)));
    set(&mut v, "subsample_xi", p.subsample_xi.map(|x| json!(x)));
    set(&mut v, "rounds_B", p.rounds.map(|x| json!(x)));
    set(&mut v, "trees_per_round_K", p.trees_per_round.map(|x| json!(x)));
    set(&mut v, "truncation_M", p.truncation.as_deref().map(number_or_keyword));
    set(&mut v, "freeze_after", p.freeze_after.as_deref().map(number_or_keyword));
    set(&mut v, "seed", p.seed.map(|x| json!(x)));
    set(&mut tree, "max_depth", p.max_depth.map(|x| json!(x)));
    set(&mut tree, "min_leaf", p.min_leaf.as_deref().map(number_or_keyword));
    set(&mut tree, "split_rule", p.split_rule.map(|r| serde_json::to_value(r).expect("rule serializes")));
    if tree.as_object().is_some_and(|t| !t.is_empty()) {
        v["tree"] = tree;
    }
    v
}

fn params_for(cfg: &RunConfig, p: &ParamArgs) -> Result<brat::BoostParams> {
    let flags = params_patch(p);
    let params = resolve_params(&[cfg.params.as_ref(), Some(&flags)], p.algo)?;
    params.validate()?;
    Ok(params)
}

fn write_model(model: &BratModel, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(model).map_err(brat::BratError::from)? + "\n";
    fs::write(path, text).map_err(brat::BratError::from)?;
    Ok(())
}

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<fs::File>> {
    let mut w = csv::Writer::from_path(path).map_err(brat::BratError::from)?;
    w.write_record(header).map_err(brat::BratError::from)?;
    Ok(w)
}

fn train_cmd(common: &CommonArgs, p: &ParamArgs, data: &DataArgs) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let params = params_for(&cfg, p)?;
    let out = out_dir(common, &cfg)?;
    let target = target(data, &cfg);
    let path = pick(&data.train, &cfg.data.train, "train")?;
    let mut ds = load_csv(&path, target, false)?;
    if let Some(spec) = &cfg.split {
        spec.validate()?;
        let (tr, calib, test) = split(&ds, spec)?;
        write_csv(&calib, out.join("calib.csv"), target)?;
        write_csv(&test, out.join("test.csv"), target)?;
        ds = tr;
    }
    let scaler: Option<MinMaxScaler> = (data.scale || cfg.data.scale).then(|| ds.fit_minmax());
    if let Some(s) = &scaler {
        ds = ds.scaled(s)?;
    }
    let (mut model, log) = train_with_log(&ds, &params)?;
    model.set_feature_scaling(scaler);
    write_model(&model, &model_path(common, &cfg)?)?;
    let mut w = csv_writer(&out.join("train_log.csv"), &["round", "train_mse", "train_mse_rescaled"])?;
    for r in &log {
        w.write_record([r.round.to_string(), r.train_mse_raw.to_string(), r.train_mse_rescaled.to_string()])
            .map_err(brat::BratError::from)?;
    }
    w.flush().map_err(brat::BratError::from)?;
    Ok(())
}

fn predict_cmd(common: &CommonArgs, data: &DataArgs) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let model = load_model(&model_path(common, &cfg)?)?;
    let test = load_for(&model, &pick(&data.test, &cfg.data.test, "test")?, target(data, &cfg))?;
    let out = out_dir(common, &cfg)?;
    let mut w = csv_writer(&out.join("predictions.csv"), &["point_id", "prediction", "prediction_raw"])?;
    for (i, x) in test.rows().enumerate() {
        let raw = model.predict(x, false)?;
        let pred = model.predict(x, true)?;
        w.write_record([i.to_string(), pred.to_string(), raw.to_string()])
            .map_err(brat::BratError::from)?;
    }
    w.flush().map_err(brat::BratError::from)?;
    Ok(())
}

fn intervals_cmd(common: &CommonArgs, data: &DataArgs, iv: &IntervalArgs, sk: &SketchArgs) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let alpha = iv.alpha.or(cfg.alpha).unwrap_or(0.1);
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CliError::Config(format!("alpha = {alpha} is outside (0, 1)")));
    }
    let kinds = iv
        .kinds
        .clone()
        .or_else(|| cfg.kinds.clone())
        .unwrap_or_else(|| IntervalKind::ALL.to_vec());
    let calibrate = !iv.no_calibrate && cfg.calibrate.unwrap_or(true);
    let model = load_model(&model_path(common, &cfg)?)?;
    let target = target(data, &cfg);
    let calib = load_for(&model, &pick(&data.calib, &cfg.data.calib, "calib")?, target)?;
    let test = load_for(&model, &pick(&data.test, &cfg.data.test, "test")?, target)?;

    let engine = match sketch_options(&cfg, sk)? {
        Some(opts) => Inference::sketched(&model, &opts, None)?,
        None => Inference::exact(&model, &KernelOptions::default())?,
    };
    let sigma = estimate_sigma(&model, &calib)?.sigma_hat;
    let mut gamma = [1.0; 3];
    if calibrate && kinds.contains(&IntervalKind::Pi) {
        gamma[1] = calibrate_widths(&engine, &calib, alpha, IntervalKind::Pi, sigma)?;
    }
    let points = engine.points(&test)?;
    let out = out_dir(common, &cfg)?;
    let mut w = csv_writer(
        &out.join("intervals.csv"),
        &["point_id", "prediction", "lower", "upper", "kind", "alpha", "gamma", "r_norm", "sigma_hat"],
    )?;
    for (i, pt) in points.iter().enumerate() {
        for &kind in &kinds {
            let g = gamma[kind as usize];
            let iv = intervals::interval(kind, pt.prediction, pt.r_norm, sigma, alpha, g, model.rescale())?;
            w.write_record([
                i.to_string(),
                pt.prediction.to_string(),
                iv.lower().to_string(),
                iv.upper().to_string(),
                kind.to_string(),
                alpha.to_string(),
                g.to_string(),
                pt.r_norm.to_string(),
                sigma.to_string(),
            ])
            .map_err(brat::BratError::from)?;
        }
    }
    w.flush().map_err(brat::BratError::from)?;
    Ok(())
}

fn sketch_options(cfg: &RunConfig, sk: &SketchArgs) -> Result<Option<SketchOptions>> {
    if sk.sketch_s.is_none() && !cfg.sketch.enabled {
        return Ok(None);
    }
    let s = sk
        .sketch_s
        .or(cfg.sketch.s)
        .ok_or_else(|| CliError::Config("sketch.s is required when sketching is enabled".into()))?;
    Ok(Some(SketchOptions {
        s,
        method: sk.sketch_method.unwrap_or(cfg.sketch.method),
        seed: sk.sketch_seed.unwrap_or(cfg.sketch.seed),
        symmetrize: cfg.sketch.symmetrize,
    }))
}

fn resolve_columns(ds: &Dataset, names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|name| {
            if let Some(i) = ds.column_names().and_then(|c| c.iter().position(|c| c == name)) {
                return Ok(i);
            }
            match name.parse::<usize>() {
                Ok(i) if i < ds.d() => Ok(i),
                _ => Err(CliError::Config(format!("drop: unknown feature `{name}`"))),
            }
        })
        .collect()
}

fn importance_cmd(
    common: &CommonArgs,
    p: &ParamArgs,
    data: &DataArgs,
    drop: Option<Vec<String>>,
    alpha: Option<f64>,
    sk: &SketchArgs,
) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let params = params_for(&cfg, p)?;
    let alpha = alpha.or(cfg.alpha).unwrap_or(0.05);
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CliError::Config(format!("alpha = {alpha} is outside (0, 1)")));
    }
    let target = target(data, &cfg);
    let mut full = load_csv(pick(&data.train, &cfg.data.train, "train")?, target, false)?;
    let mut holdout = load_csv(pick(&data.holdout, &cfg.data.holdout, "holdout")?, target, false)?;
    if data.scale || cfg.data.scale {
        let s = full.fit_minmax();
        full = full.scaled(&s)?;
        holdout = holdout.scaled(&s)?;
    }
    let drop = drop
        .or_else(|| cfg.drop.clone())
        .ok_or_else(|| CliError::Config("drop is required (--drop)".into()))?;
    let dropped = resolve_columns(&full, &drop)?;
    let kept: Vec<usize> = (0..full.d()).filter(|c| !dropped.contains(c)).collect();
    if dropped.is_empty() || kept.is_empty() {
        return Err(CliError::Config("drop must remove some but not all features".into()));
    }
    let sketch = match sketch_options(&cfg, sk)? {
        Some(o) => Some(ViSketch {
            s: o.s,
            r: sk.sketch_r.or(cfg.sketch.r).unwrap_or(o.s.min(holdout.n())),
            method: o.method,
            seed: o.seed,
        }),
        None => None,
    };
    let res = variable_importance_test(&full, &kept, &holdout, &params, alpha, sketch)?;
    let report = json!({
        "statistic": res.statistic,
        "dof": res.dof,
        "p_value": res.p_value,
        "reject": res.reject,
        "jitter_used": res.jitter_used,
        "alpha": alpha,
        "dropped": dropped,
        "kept": kept,
    });
    let out = out_dir(common, &cfg)?;
    let text = serde_json::to_string_pretty(&report).map_err(brat::BratError::from)? + "\n";
    fs::write(out.join("importance.json"), text).map_err(brat::BratError::from)?;
    Ok(())
}
