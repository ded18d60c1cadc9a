//! Per-pair registration and fusion metrics, written as CSV and JSON.

use std::path::Path;

use mrf_core::metrics::{MetricReport, Plane};
use serde::Serialize;

use crate::dataset::{DatasetManifest, Pair};
use crate::error::{HarnessError, Result};
use crate::model::Model;

/// Row label for metrics of the registered output.
pub const REGISTERED: &str = "registered";
/// Row label for the untouched moving image, the misaligned baseline.
pub const MISALIGNED: &str = "misaligned";

#[derive(Debug, Clone, PartialEq)]
pub struct PairEval {
    pub pair: String,
    pub method: &'static str,
    pub report: MetricReport,
}

/// Column means of both methods.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub pairs: usize,
    pub registered: Means,
    pub misaligned: Means,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Means {
    pub mse: f64,
    pub ncc: f64,
    pub mi: f64,
    pub cc: f64,
    pub ssim: f64,
    pub vif: f64,
    pub qabf: f64,
}

impl From<MetricReport> for Means {
    fn from(r: MetricReport) -> Self {
        Self {
            mse: r.mse,
            ncc: r.ncc,
            mi: r.mi,
            cc: r.cc,
            ssim: r.ssim,
            vif: r.vif,
            qabf: r.qabf,
        }
    }
}

/// Registers and fuses every pair. Each pair yields a `registered` row and a
/// `misaligned` row (the raw moving image, fused unregistered).
///
/// The fused image treats the registered moving image as infrared and the
/// fixed image as visible.
pub fn evaluate(model: &Model, pairs: &[Pair]) -> Result<Vec<PairEval>> {
    let mut rows = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        let (_, registered) = model.register(&p.fixed, &p.moving)?;
        let fixed = Plane::from_image(&p.fixed)?;
        for (method, aligned) in [(REGISTERED, &registered), (MISALIGNED, &p.moving)] {
            let fused = model.fuse(aligned, &p.fixed)?;
            let a = Plane::from_image(aligned)?;
            let report = MetricReport::compute(&fixed, &a, &Plane::from_image(&fused)?, &a, &fixed)?;
            rows.push(PairEval {
                pair: p.name.clone(),
                method,
                report,
            });
        }
    }
    Ok(rows)
}

/// Metrics on the manifest's test split.
pub fn evaluate_split(model: &Model, manifest: &DatasetManifest) -> Result<Vec<PairEval>> {
    if manifest.test.is_empty() {
        return Err(HarnessError::data("manifest has an empty test split"));
    }
    evaluate(model, &manifest.pairs(&manifest.test)?)
}

pub fn mean_of(rows: &[PairEval], method: &str) -> Option<MetricReport> {
    let picked: Vec<MetricReport> = rows.iter().filter(|r| r.method == method).map(|r| r.report).collect();
    MetricReport::mean(&picked)
}

pub fn summarize(rows: &[PairEval]) -> Result<Summary> {
    let missing = || HarnessError::data("no evaluation rows");
    Ok(Summary {
        pairs: rows.iter().filter(|r| r.method == REGISTERED).count(),
        registered: mean_of(rows, REGISTERED).ok_or_else(missing)?.into(),
        misaligned: mean_of(rows, MISALIGNED).ok_or_else(missing)?.into(),
    })
}

/// Header of the per-pair CSV; the order never changes.
pub fn csv_header() -> String {
    let mut cols = vec!["pair", "method"];
    cols.extend(MetricReport::COLUMNS);
    cols.join(",")
}

pub fn write_csv(path: &Path, rows: &[PairEval]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| HarnessError::data(format!("{}: {e}", path.display()));
    w.write_record(csv_header().split(',')).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.pair.clone(), r.method.to_string()];
        rec.extend(r.report.values().iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn write_json(path: &Path, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).map_err(|e| HarnessError::data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

/// One column of mean registered metrics per labelled run.
pub fn write_comparison(path: &Path, runs: &[(String, MetricReport)]) -> Result<()> {
    let err = |e: csv::Error| HarnessError::data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec!["metric".to_string()];
    header.extend(runs.iter().map(|(label, _)| label.clone()));
    w.write_record(&header).map_err(err)?;
    for (i, col) in MetricReport::COLUMNS.iter().enumerate() {
        let mut rec = vec![col.to_string()];
        rec.extend(runs.iter().map(|(_, r)| r.values()[i].to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}
