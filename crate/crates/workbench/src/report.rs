//! Report emission: summary CSV, detail JSONL, and plot-ready sweep CSVs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Result, WorkbenchError};
use crate::experiment::{MethodSummary, ResultRecord};
use crate::sweep::SweepReport;

/// Paths written by [`emit_report`].
#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub summary_csv: PathBuf,
    pub detail_jsonl: PathBuf,
}

/// Write the per-method summary CSV and the per-record JSONL detail.
/// Refuses empty record sets and leaves no files behind in that case.
pub fn emit_report(
    records: &[ResultRecord],
    summaries: &[MethodSummary],
    out_dir: impl AsRef<Path>,
) -> Result<ReportPaths> {
    if records.is_empty() {
        return Err(WorkbenchError::validation(
            "no records to report; refusing to write empty files",
        ));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;

    let summary_csv = out_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_csv)?;
    w.write_record(["method", "n", "accuracy", "mean_recall", "mean_l_supp"])?;
    for s in summaries {
        w.write_record([
            s.method.clone(),
            s.n.to_string(),
            format!("{:.6}", s.accuracy),
            s.mean_recall.map_or(String::new(), |v| format!("{v:.6}")),
            s.mean_l_supp.map_or(String::new(), |v| format!("{v:.6}")),
        ])?;
    }
    w.flush()?;

    let detail_jsonl = out_dir.join("detail.jsonl");
    let mut f = fs::File::create(&detail_jsonl)?;
    for record in records {
        serde_json::to_writer(&mut f, record)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;

    Ok(ReportPaths {
        summary_csv,
        detail_jsonl,
    })
}

/// Write one sweep's plot-ready CSV: `x, mean, stderr`.
pub fn emit_sweep_csv(report: &SweepReport, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("sweep_{}.csv", report.parameter));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["x", "mean", "stderr"])?;
    for p in &report.points {
        w.write_record([
            format!("{}", p.x),
            format!("{:.6}", p.mean),
            format!("{:.6}", p.stderr),
        ])?;
    }
    w.flush()?;
    Ok(path)
}

/// Re-derive per-method accuracy from an emitted detail file; lets tests
/// confirm the summary matches what was written.
pub fn accuracy_from_detail(path: impl AsRef<Path>) -> Result<Vec<(String, usize, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut per_method: Vec<(String, usize, usize)> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ResultRecord = serde_json::from_str(line)?;
        match per_method.iter_mut().find(|(m, _, _)| *m == record.method) {
            Some((_, n, correct)) => {
                *n += 1;
                *correct += record.correct as usize;
            }
            None => per_method.push((record.method.clone(), 1, record.correct as usize)),
        }
    }
    Ok(per_method
        .into_iter()
        .map(|(m, n, c)| (m, n, c as f64 / n as f64))
        .collect())
}
