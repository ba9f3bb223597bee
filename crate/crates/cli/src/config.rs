//! Run configuration: a JSON file whose fields are overridden by flags.

use std::path::{Path, PathBuf};

use brat::data::SplitSpec;
use brat::infer::IntervalKind;
use brat::kernel::SketchMethod;
use brat::sim::{Scenario, SimSettings};
use brat::{Algo, BoostParams};
use serde::Deserialize;
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub holdout: Option<PathBuf>,
    pub target: Option<String>,
    #[serde(default)]
    pub scale: bool,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SketchConfig {
    #[serde(default)]
    pub enabled: bool,
    pub s: Option<usize>,
    pub r: Option<usize>,
    #[serde(default)]
    pub method: SketchMethod,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub symmetrize: bool,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Partial `BoostParams`; missing fields take the algorithm's defaults.
    pub params: Option<Value>,
    #[serde(default)]
    pub data: DataConfig,
    pub split: Option<SplitSpec>,
    pub alpha: Option<f64>,
    pub kinds: Option<Vec<IntervalKind>>,
    pub calibrate: Option<bool>,
    #[serde(default)]
    pub sketch: SketchConfig,
    /// Feature columns (names or 0-based indices) left out of the reduced
    /// model in the importance test.
    pub drop: Option<Vec<String>>,
    pub scenario: Option<Scenario>,
    #[serde(default)]
    pub sim: SimSettings,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn target(&self) -> &str {
        self.data.target.as_deref().unwrap_or("y")
    }
}

/// Overlays `patch` on `base`, rejecting keys `base` does not have.
fn merge(base: &mut Value, patch: &Value, at: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let canonical = match k.as_str() {
                    "rounds" => "rounds_B",
                    "trees_per_round" => "trees_per_round_K",
                    "truncation" => "truncation_M",
                    other => other,
                };
                let path = format!("{at}.{canonical}");
                match b.get_mut(canonical) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &path)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(CliError::Config(format!("unknown field `{path}`"))),
                }
            }
            Ok(())
        }
        (_, _) => Err(CliError::Config(format!("`{at}` must be an object"))),
    }
}

/// Defaults for the chosen algorithm overlaid with each patch in turn.
/// The algorithm comes from `algo_flag`, else the last patch naming one.
pub fn resolve_params(patches: &[Option<&Value>], algo_flag: Option<Algo>) -> Result<BoostParams, CliError> {
    let named = patches.iter().rev().flatten().find_map(|v| v.get("algo"));
    let algo = match (algo_flag, named) {
        (Some(a), _) => a,
        (None, Some(v)) => {
            serde_json::from_value(v.clone()).map_err(|e| CliError::Config(format!("params.algo: {e}")))?
        }
        (None, None) => Algo::BratD,
    };
    let mut base = serde_json::to_value(BoostParams::new(algo)).expect("params serialize");
    for patch in patches.iter().flatten() {
        merge(&mut base, patch, "params")?;
    }
    base["algo"] = serde_json::to_value(algo).expect("algo serializes");
    serde_json::from_value(base).map_err(|e| CliError::Config(format!("params: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn partial_params_fill_defaults() {
        let p = resolve_params(&[Some(&json!({"algo": "brat_p", "rounds": 50, "tree": {"max_depth": 3}}))], None).unwrap();
        assert_eq!(p.algo, Algo::BratP);
        assert_eq!(p.rounds, 50);
        assert_eq!(p.tree.max_depth, 3);
        assert_eq!(p.trees_per_round, 4);
    }

    #[test]
    fn unknown_field_is_named() {
        let e = resolve_params(&[Some(&json!({"lamda": 0.5}))], None).unwrap_err();
        assert!(e.to_string().contains("params.lamda"));
    }

    #[test]
    fn flag_algo_wins() {
        let p = resolve_params(&[Some(&json!({"algo": "brat_p"}))], Some(Algo::Boulevard)).unwrap();
        assert_eq!(p.algo, Algo::Boulevard);
    }
}
