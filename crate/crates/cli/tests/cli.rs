use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use brat::{gen_friedman, gen_vi, write_csv};
use serde_json::Value;
use tempfile::TempDir;

fn brat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brat")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = brat(args);
    assert!(
        out.status.success(),
        "brat {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn friedman_csv(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let path = dir.join(name);
    write_csv(&gen_friedman(n, 1.0, seed).unwrap(), &path, "y").unwrap();
    path
}

fn read_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            header.iter().cloned().zip(rec.iter().map(String::from)).collect()
        })
        .collect()
}

fn f(row: &BTreeMap<String, String>, col: &str) -> f64 {
    row[col].parse().unwrap()
}

/// Trains a small brat_d model in `dir/out`; returns the output directory.
fn trained(dir: &Path) -> PathBuf {
    let train = friedman_csv(dir, "train.csv", 120, 1);
    let out = dir.join("out");
    ok(&["train", "--train", s(&train), "--out", s(&out), "--rounds", "15", "--seed", "3"]);
    out
}

#[test]
fn train_writes_model_and_log() {
    let dir = TempDir::new().unwrap();
    let out = trained(dir.path());
    let log = read_rows(&out.join("train_log.csv"));
    // the round count includes the initial zero tree
    assert_eq!(log.len(), 14);
    assert_eq!(log[0]["round"], "1");
    assert_eq!(log[13]["round"], "14");
    assert!(log.iter().all(|r| f(r, "train_mse") >= 0.0));
    let model: Value = serde_json::from_str(&std::fs::read_to_string(out.join("model.json")).unwrap()).unwrap();
    assert!(model.is_object());
}

#[test]
fn same_seed_same_model_bytes() {
    let dir = TempDir::new().unwrap();
    let train = friedman_csv(dir.path(), "train.csv", 100, 2);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["train", "--train", s(&train), "--out", s(out), "--algo", "brat_p", "--rounds", "8", "--seed", "9"]);
    }
    let read = |p: &Path| std::fs::read(p.join("model.json")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn bad_lambda_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let train = friedman_csv(dir.path(), "train.csv", 50, 1);
    let out = brat(&["train", "--train", s(&train), "--out", s(&dir.path().join("o")), "--lambda", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));
}

#[test]
fn unknown_config_field_is_named() {
    let dir = TempDir::new().unwrap();
    let train = friedman_csv(dir.path(), "train.csv", 50, 1);
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"params": {"lamda": 0.5}}"#).unwrap();
    let out = brat(&["train", "--config", s(&cfg), "--train", s(&train), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("params.lamda"));
}

#[test]
fn missing_training_file_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let out = brat(&["train", "--train", s(&dir.path().join("nope.csv")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn predict_matches_row_count() {
    let dir = TempDir::new().unwrap();
    let out = trained(dir.path());
    let test = friedman_csv(dir.path(), "test.csv", 7, 5);
    ok(&["predict", "--out", s(&out), "--test", s(&test)]);
    let rows = read_rows(&out.join("predictions.csv"));
    assert_eq!(rows.len(), 7);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r["point_id"], i.to_string());
        assert!(f(r, "prediction").is_finite() && f(r, "prediction_raw").is_finite());
    }
}

#[test]
fn intervals_one_row_per_point_and_kind() {
    let dir = TempDir::new().unwrap();
    let out = trained(dir.path());
    let calib = friedman_csv(dir.path(), "calib.csv", 40, 6);
    let test = friedman_csv(dir.path(), "test.csv", 10, 7);
    let args = ["intervals", "--out", s(&out), "--calib", s(&calib), "--test", s(&test), "--kinds", "ci,pi,ri"];
    ok(&args);
    let rows = read_rows(&out.join("intervals.csv"));
    assert_eq!(rows.len(), 30);
    for r in &rows {
        let (lo, hi, pred) = (f(r, "lower"), f(r, "upper"), f(r, "prediction"));
        assert!(lo <= pred && pred <= hi, "{r:?}");
        assert_eq!(f(r, "alpha"), 0.1);
        if r["kind"] != "pi" {
            assert_eq!(f(r, "gamma"), 1.0);
        }
    }
    // a confidence interval is never wider than the prediction interval
    // before calibration
    ok(&[&args[..], &["--no-calibrate"]].concat());
    let rows = read_rows(&out.join("intervals.csv"));
    for pair in rows.chunks(3) {
        let w = |r: &BTreeMap<String, String>| f(r, "upper") - f(r, "lower");
        assert!(w(&pair[0]) <= w(&pair[1]));
    }
}

#[test]
fn alpha_outside_unit_interval_is_rejected() {
    let dir = TempDir::new().unwrap();
    let out = trained(dir.path());
    let calib = friedman_csv(dir.path(), "calib.csv", 20, 6);
    for alpha in ["0", "1", "-0.5"] {
        let o = brat(&[
            "intervals",
            "--out",
            s(&out),
            "--calib",
            s(&calib),
            "--test",
            s(&calib),
            &format!("--alpha={alpha}"),
        ]);
        assert_eq!(o.status.code(), Some(2), "alpha {alpha}");
        assert!(!out.join("intervals.csv").exists());
    }
}

#[test]
fn full_sketch_matches_exact_intervals() {
    let dir = TempDir::new().unwrap();
    let out = trained(dir.path());
    let calib = friedman_csv(dir.path(), "calib.csv", 30, 6);
    let test = friedman_csv(dir.path(), "test.csv", 12, 7);
    let base = ["intervals", "--out", s(&out), "--calib", s(&calib), "--test", s(&test), "--kinds", "ci"];
    ok(&base);
    let exact = read_rows(&out.join("intervals.csv"));
    ok(&[&base[..], &["--sketch-s", "120"]].concat());
    let sketched = read_rows(&out.join("intervals.csv"));
    for (a, b) in exact.iter().zip(&sketched) {
        for col in ["prediction", "r_norm", "lower", "upper"] {
            let (x, y) = (f(a, col), f(b, col));
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{col}: {x} vs {y}");
        }
    }
}

#[test]
fn importance_report() {
    let dir = TempDir::new().unwrap();
    let (full, _) = gen_vi(200, 0.5, 2.0, 4).unwrap();
    let (hold, _) = gen_vi(8, 0.5, 2.0, 5).unwrap();
    let (train, holdout) = (dir.path().join("vi.csv"), dir.path().join("hold.csv"));
    write_csv(&full, &train, "y").unwrap();
    write_csv(&hold, &holdout, "y").unwrap();
    let out = dir.path().join("out");
    ok(&[
        "importance",
        "--train",
        s(&train),
        "--holdout",
        s(&holdout),
        "--drop",
        "x3",
        "--rounds",
        "10",
        "--out",
        s(&out),
    ]);
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(out.join("importance.json")).unwrap()).unwrap();
    assert_eq!(rep["dof"], 8);
    assert_eq!(rep["dropped"], serde_json::json!([2]));
    assert_eq!(rep["kept"], serde_json::json!([0, 1]));
    let p = rep["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert_eq!(rep["reject"].as_bool().unwrap(), p < 0.05);

    let o = brat(&["importance", "--train", s(&train), "--holdout", s(&holdout), "--drop", "x9", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sim_summary_agrees_with_its_table() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sim");
    ok(&[
        "sim",
        "--scenario",
        "coverage",
        "--reps",
        "2",
        "--n",
        "150",
        "--rounds",
        "11",
        "--seed",
        "4",
        "--out",
        s(&out),
    ]);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let rows = read_rows(&out.join("coverage.csv"));
    for kind in ["ci", "pi", "ri"] {
        let mine: Vec<_> = rows.iter().filter(|r| r["kind"] == kind).collect();
        let k = &summary["kinds"][kind];
        assert_eq!(k["rows"].as_u64().unwrap() as usize, mine.len());
        let cov = mine.iter().map(|r| f(r, "covered")).sum::<f64>() / mine.len() as f64;
        let width = mine.iter().map(|r| f(r, "width")).sum::<f64>() / mine.len() as f64;
        assert!((cov - k["coverage"].as_f64().unwrap()).abs() < 1e-12);
        assert!((width - k["mean_width"].as_f64().unwrap()).abs() < 1e-9 * width.max(1.0));
    }
}

#[test]
fn unknown_scenario_is_rejected() {
    let dir = TempDir::new().unwrap();
    let o = brat(&["sim", "--scenario", "warp-drive", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warp-drive"));
}
