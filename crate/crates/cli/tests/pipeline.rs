use std::path::Path;
use std::process::Command;

use inlierq::config::{ExperimentConfig, ReportFormat};
use inlierq::experiment::{run_experiment, sweep_points, Context, SweepPoint, Verb};
use inlierq::metrics::nll_proxy;
use inlierq::report::{emit_reports, read_results_csv, report_rows, RESULTS_HEADER};
use inlierq_core::calibrate::Method;
use inlierq_core::detector::forward;

const HEADER: &str =
    "exp_id,method,bits_w,bits_a,tau,k,layer,layer_mse,rel_err,skew_all,skew_inlier,inlier_frac,nll_proxy,peak_hit,failed,reason";

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.calib.n_calib = 8;
    cfg.n_eval = 4;
    cfg
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_inlierq"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn header_is_pinned() {
    assert_eq!(RESULTS_HEADER, HEADER);
}

#[test]
fn calibrate_writes_one_row_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["calibrate", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for (layer, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), 16);
        assert_eq!(row[1], "inlierq");
        assert_eq!(row[6], layer.to_string());
        for v in &row[7..14] {
            assert!(v.parse::<f64>().unwrap().is_finite(), "{v}");
        }
        assert_eq!(row[14], "false");
        assert_eq!(row[15], "");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("results.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 1);
}

#[test]
fn csv_parses_back_to_the_rows_written() {
    let cfg = small();
    let records = run_experiment(&cfg, Verb::Compare).unwrap();
    assert_eq!(records.len(), Method::ALL.len());
    let dir = tempfile::tempdir().unwrap();
    emit_reports(&records, ReportFormat::Csv, dir.path(), Verb::Compare).unwrap();
    let back = read_results_csv(&dir.path().join("results.csv")).unwrap();
    assert_eq!(back, report_rows(&records));
    assert!(!dir.path().join("results.json").exists());
}

#[test]
fn failed_point_becomes_a_failed_row() {
    let cfg = small();
    let ctx = Context::new(&cfg).unwrap();
    let bad = SweepPoint {
        method: Method::InlierQ,
        bits_w: 4,
        bits_a: 4,
        tau: 1.5,
        k: 3,
    };
    let good = SweepPoint { tau: 0.5, ..bad };
    let records = ctx.run(&[bad, good]);
    assert!(records[0].failed);
    assert!(!records[0].reason.is_empty());
    assert!(records[0].nll_proxy.is_none() && records[0].layers.is_empty());
    assert!(!records[1].failed);

    let dir = tempfile::tempdir().unwrap();
    emit_reports(&records, ReportFormat::Both, dir.path(), Verb::SweepTau).unwrap();
    let rows = read_results_csv(&dir.path().join("results.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].failed && rows[0].layer.is_none() && rows[0].layer_mse.is_none());
    let sweep = std::fs::read_to_string(dir.path().join("sweep_tau.csv")).unwrap();
    assert_eq!(sweep.lines().next(), Some("method,tau,nll_proxy,peak_hit,failed"));
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn bypass_reproduces_full_precision() {
    let mut cfg = small();
    cfg.calib.bits_w = 32;
    cfg.calib.bits_a = 32;
    let ctx = Context::new(&cfg).unwrap();
    let out = ctx.run_point(&sweep_points(&cfg, Verb::Calibrate)[0]).unwrap();
    assert!(out.evaluation.layer_mse.iter().all(|&m| m == 0.0));
    assert!(out.evaluation.rel_err.iter().all(|&e| e == 0.0));
    let k = cfg.eval_k();
    let fp: f64 = ctx
        .eval_scenes
        .iter()
        .map(|s| {
            let (h, _) = forward(&ctx.model, s).unwrap();
            nll_proxy(&h, &h, k).unwrap()
        })
        .sum::<f64>()
        / ctx.eval_scenes.len() as f64;
    assert!((out.evaluation.nll_proxy - fp).abs() < 1e-12);
}

#[test]
fn sweep_points_cover_the_configured_values() {
    let cfg = ExperimentConfig::default();
    assert_eq!(sweep_points(&cfg, Verb::Calibrate).len(), 1);
    assert_eq!(sweep_points(&cfg, Verb::SweepTau).len(), cfg.sweep.tau.len());
    let ks: Vec<usize> = sweep_points(&cfg, Verb::SweepK).iter().map(|p| p.k).collect();
    assert_eq!(ks, cfg.sweep.k);
    assert_eq!(
        sweep_points(&cfg, Verb::Compare).len(),
        Method::ALL.len() * cfg.sweep.bits.len()
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str], config: Option<&str>| {
        let mut cmd = bin();
        cmd.args(args).arg("--out").arg(dir.path().join("out"));
        if let Some(text) = config {
            cmd.arg("--config").arg(write_config(dir.path(), text));
        }
        cmd.output().unwrap().status.code()
    };
    assert_eq!(code(&["selftest"], None), Some(0));
    assert_eq!(
        code(&["calibrate"], Some(r#"{"calib": {"n_calib": 4}, "n_eval": 2}"#)),
        Some(0)
    );
    assert_eq!(code(&["calibrate"], Some(r#"{"calib": {"nope": 1}}"#)), Some(1));
    assert_eq!(code(&["calibrate"], Some(r#"{"calib": {"tau": 1.5}}"#)), Some(1));
    assert_eq!(code(&["sweep-k"], Some(r#"{"sweep": {"k": []}}"#)), Some(1));

    // An output path that is a regular file cannot hold the reports.
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "").unwrap();
    let out = bin()
        .args(["calibrate", "--out"])
        .arg(&blocker)
        .arg("--config")
        .arg(write_config(dir.path(), r#"{"calib": {"n_calib": 4}, "n_eval": 2}"#))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("calibrate")
        .arg("--config")
        .arg(write_config(dir.path(), r#"{"calib": {"bits_a": 9}}"#))
        .output()
        .unwrap();
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("calib.bits_a"), "{stderr}");
}
