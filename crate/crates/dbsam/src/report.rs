//! CSV reports: per-sample metrics, training loss logs and ablation tables.
//!
//! Floats are written in Rust's shortest round-trip form, so parsing a
//! report gives back the exact values.

use std::path::Path;

use dbsam_core::metrics::{MetricsReport, SampleMetrics};
use dbsam_core::train::StepLog;

use crate::{Error, Result};

pub const MEAN_ROW: &str = "MEAN";

fn same(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
}

/// `id,dsc,nsd` rows followed by `MEAN,<dsc>,<nsd>`.
pub fn metrics_csv(r: &MetricsReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "dsc", "nsd"])?;
    for s in &r.per_sample {
        if s.id == MEAN_ROW {
            return Err(Error::Format(format!("sample id {MEAN_ROW} is reserved")));
        }
        w.write_record([s.id.clone(), s.dsc.to_string(), s.nsd.to_string()])?;
    }
    w.write_record([MEAN_ROW.to_string(), r.mean_dsc.to_string(), r.mean_nsd.to_string()])?;
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn float(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Format(format!("not a number: {s:?}")))
}

/// Parses [`metrics_csv`] output; the mean row must equal the mean of the rows.
pub fn parse_metrics_csv(text: &str) -> Result<MetricsReport> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    if r.headers()? != vec!["id", "dsc", "nsd"] {
        return Err(Error::Format("metrics header must be id,dsc,nsd".into()));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push((rec[0].to_string(), float(&rec[1])?, float(&rec[2])?));
    }
    let (id, dsc, nsd) = rows.pop().ok_or_else(|| Error::Format("missing MEAN row".into()))?;
    if id != MEAN_ROW {
        return Err(Error::Format("last row must be the MEAN row".into()));
    }
    let report = MetricsReport::new(rows.into_iter().map(|(id, dsc, nsd)| SampleMetrics { id, dsc, nsd }).collect());
    if !same(report.mean_dsc, dsc) || !same(report.mean_nsd, nsd) {
        return Err(Error::Format(format!(
            "MEAN row ({dsc}, {nsd}) disagrees with the rows ({}, {})",
            report.mean_dsc, report.mean_nsd
        )));
    }
    Ok(report)
}

pub fn loss_csv(log: &[StepLog]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "epoch", "lr", "loss"])?;
    for l in log {
        w.write_record([l.step.to_string(), l.epoch.to_string(), l.lr.to_string(), l.loss.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<StepLog>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    if r.headers()? != vec!["step", "epoch", "lr", "loss"] {
        return Err(Error::Format("loss header must be step,epoch,lr,loss".into()));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            let int = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("not an integer: {s:?}")));
            Ok(StepLog {
                step: int(&rec[0])?,
                epoch: int(&rec[1])?,
                lr: float(&rec[2])?,
                loss: float(&rec[3])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub config: String,
    pub dsc: f64,
    pub nsd: f64,
    pub final_loss: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config", "dsc", "nsd", "final_loss"])?;
    for r in rows {
        w.write_record([r.config.clone(), r.dsc.to_string(), r.nsd.to_string(), r.final_loss.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Fixed-width table for terminals.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<20} {:>8} {:>8} {:>10}\n", "config", "DSC", "NSD", "loss");
    for r in rows {
        s += &format!("{:<20} {:>8.4} {:>8.4} {:>10.4}\n", r.config, r.dsc, r.nsd, r.final_loss);
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::at(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::at(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::at(path, e))
}
