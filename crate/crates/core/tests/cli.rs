use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fuselite::predictor::{FitOptions, Predictor};
use fuselite::table::{read_csv, CsvOptions};

const SMALL: [&str; 7] = [
    "backbone_dim=16",
    "backbone_depth=1",
    "fusion_dim=16",
    "image_size=16",
    "batch_size=16",
    "max_epochs=2",
    "learning_rate=1e-3",
];

fn toy_csv() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy_multimodal.csv")
}

fn fuselite(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fuselite"))
        .args(args)
        .env_remove("FUSELITE_SEED")
        .env("NO_COLOR", "1")
        .output()
        .unwrap()
}

fn fit_toy(out: &Path, extra: &[&str]) -> Output {
    let csv = toy_csv();
    let mut args = vec![
        "fit",
        "--train",
        csv.to_str().unwrap(),
        "--label",
        "outcome",
        "--out",
        out.to_str().unwrap(),
    ];
    for s in SMALL {
        args.extend(["--set", s]);
    }
    args.extend(extra);
    fuselite(&args)
}

#[test]
fn fit_then_evaluate_prints_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model");
    let fit = fit_toy(&model, &[]);
    assert!(
        fit.status.success(),
        "{}",
        String::from_utf8_lossy(&fit.stderr)
    );
    let eval = fuselite(&[
        "evaluate",
        "--model",
        model.to_str().unwrap(),
        "--data",
        toy_csv().to_str().unwrap(),
    ]);
    assert_eq!(eval.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert!(report["f1_weighted"].is_number());
}

#[test]
fn missing_model_flag_is_a_usage_error() {
    let out = fuselite(&["predict", "--data", "x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--model"));
    assert!(out.stdout.is_empty());
}

#[test]
fn unknown_flags_and_bad_overrides_exit_one_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model");
    let out = fit_toy(&model, &["--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let out = fit_toy(&model, &["--set", "no_such_key=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--set"));
    assert!(!model.exists());
}

#[test]
fn missing_data_file_exits_two() {
    let out = fuselite(&[
        "fit",
        "--train",
        "/nonexistent.csv",
        "--label",
        "y",
        "--out",
        "/tmp/never",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn overrides_are_recorded_in_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model");
    assert!(fit_toy(&model, &["--set", "weight_decay=0.01"])
        .status
        .success());
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(model.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["overrides"]["learning_rate"], serde_json::json!(1e-3));
    assert_eq!(meta["preset"]["learning_rate"], serde_json::json!(1e-3));
    assert_eq!(meta["preset"]["weight_decay"], serde_json::json!(0.01));
}

#[test]
fn cli_predict_matches_library_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model");
    assert!(fit_toy(&model, &[]).status.success());
    let cli = fuselite(&[
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--data",
        toy_csv().to_str().unwrap(),
    ]);
    assert!(cli.status.success());

    let data = read_csv(toy_csv(), &CsvOptions::default()).unwrap();
    let mut opts = FitOptions::default();
    opts.overrides = fuselite::cli::parse_overrides(&SMALL.map(String::from)).unwrap();
    let mut p = Predictor::new("outcome");
    p.fit(&data, &opts).unwrap();
    let mut lib = Vec::new();
    fuselite::cli::write_predictions(&mut lib, &p.predict(&data).unwrap(), ',').unwrap();
    assert_eq!(cli.stdout, lib);
}

#[test]
fn embed_writes_fusion_width_columns() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model");
    assert!(fit_toy(&model, &[]).status.success());
    let out = fuselite(&[
        "embed",
        "--model",
        model.to_str().unwrap(),
        "--data",
        toy_csv().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 16);
    assert_eq!(lines.count(), 120);
}
