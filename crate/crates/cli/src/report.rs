//! CSV and JSON report files.
//!
//! `results.csv` is long format: one line per experiment and layer, with the
//! experiment-level metrics repeated on each of its lines. A failed
//! experiment is a single line with every numeric column empty.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ReportFormat;
use crate::experiment::{ExperimentRecord, Verb};

pub const RESULTS_HEADER: &str =
    "exp_id,method,bits_w,bits_a,tau,k,layer,layer_mse,rel_err,skew_all,skew_inlier,inlier_frac,nll_proxy,peak_hit,failed,reason";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no rows to report")]
    NoRows,
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("cannot write {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("cannot serialize {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub exp_id: String,
    pub method: String,
    pub bits_w: u8,
    pub bits_a: u8,
    pub tau: f64,
    pub k: usize,
    pub layer: Option<usize>,
    pub layer_mse: Option<f64>,
    pub rel_err: Option<f64>,
    pub skew_all: Option<f64>,
    pub skew_inlier: Option<f64>,
    pub inlier_frac: Option<f64>,
    pub nll_proxy: Option<f64>,
    pub peak_hit: Option<f64>,
    pub failed: bool,
    pub reason: String,
}

pub fn report_rows(records: &[ExperimentRecord]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for r in records {
        let base = ReportRow {
            exp_id: r.exp_id.clone(),
            method: r.method.clone(),
            bits_w: r.bits_w,
            bits_a: r.bits_a,
            tau: r.tau,
            k: r.k,
            layer: None,
            layer_mse: None,
            rel_err: None,
            skew_all: None,
            skew_inlier: None,
            inlier_frac: None,
            nll_proxy: None,
            peak_hit: None,
            failed: r.failed,
            reason: r.reason.clone(),
        };
        if r.failed || r.layers.is_empty() {
            rows.push(base);
            continue;
        }
        for l in &r.layers {
            rows.push(ReportRow {
                layer: Some(l.layer),
                layer_mse: Some(l.layer_mse),
                rel_err: Some(l.rel_err),
                skew_all: Some(l.skew_all),
                skew_inlier: Some(l.skew_inlier),
                inlier_frac: Some(l.inlier_frac),
                nll_proxy: r.nll_proxy,
                peak_hit: r.peak_hit,
                ..base.clone()
            });
        }
    }
    rows
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ReportRow>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

#[derive(Debug, Serialize)]
struct SweepTauRow<'a> {
    method: &'a str,
    tau: f64,
    nll_proxy: Option<f64>,
    peak_hit: Option<f64>,
    failed: bool,
}

#[derive(Debug, Serialize)]
struct SweepKRow<'a> {
    method: &'a str,
    k: usize,
    nll_proxy: Option<f64>,
    peak_hit: Option<f64>,
    failed: bool,
}

/// Writes the report files for `records` into `out_dir` and returns their
/// paths. Sweep verbs also get a compact plot-ready CSV.
pub fn emit_reports(
    records: &[ExperimentRecord],
    format: ReportFormat,
    out_dir: &Path,
    verb: Verb,
) -> Result<Vec<PathBuf>, ReportError> {
    if records.is_empty() {
        return Err(ReportError::NoRows);
    }
    fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    if format.csv() {
        let path = out_dir.join("results.csv");
        write_csv(&path, &report_rows(records))?;
        written.push(path);
    }
    if format.json() {
        let path = out_dir.join("results.json");
        let text = serde_json::to_string_pretty(records).map_err(|source| ReportError::Json {
            path: path.clone(),
            source,
        })?;
        fs::write(&path, text + "\n").map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    match verb {
        Verb::SweepTau => {
            let path = out_dir.join("sweep_tau.csv");
            let rows: Vec<SweepTauRow> = records
                .iter()
                .map(|r| SweepTauRow {
                    method: &r.method,
                    tau: r.tau,
                    nll_proxy: r.nll_proxy,
                    peak_hit: r.peak_hit,
                    failed: r.failed,
                })
                .collect();
            write_csv(&path, &rows)?;
            written.push(path);
        }
        Verb::SweepK => {
            let path = out_dir.join("sweep_k.csv");
            let rows: Vec<SweepKRow> = records
                .iter()
                .map(|r| SweepKRow {
                    method: &r.method,
                    k: r.k,
                    nll_proxy: r.nll_proxy,
                    peak_hit: r.peak_hit,
                    failed: r.failed,
                })
                .collect();
            write_csv(&path, &rows)?;
            written.push(path);
        }
        Verb::Calibrate | Verb::Compare => {}
    }
    Ok(written)
}
