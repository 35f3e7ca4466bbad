use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::{run_experiment, RunReport};
use super::{ExperimentConfig, Variant};
use crate::error::{Error, Result};
use crate::selfloop::write_atomic;

pub const SUMMARY_FILE: &str = "summary.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const FILTER_FILE: &str = "filter.csv";
pub const TABLE_FILE: &str = "table.csv";

fn csv_bytes<F>(fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    fill(&mut w).map_err(|e| Error::Config(format!("csv encoding failed: {e}")))?;
    w.into_inner()
        .map_err(|e| Error::Config(format!("csv encoding failed: {e}")))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes `summary.json`, `curves.csv` and `filter.csv` into `out_dir`.
pub fn emit_report(report: &RunReport, out_dir: impl AsRef<Path>) -> Result<()> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut json = serde_json::to_vec_pretty(report)
        .map_err(|e| Error::Config(format!("cannot serialise report: {e}")))?;
    json.push(b'\n');

    let curves = csv_bytes(|w| {
        w.write_record([
            "epoch",
            "iteration",
            "train_loss",
            "student_val_acc",
            "teacher_val_acc",
            "test_acc",
        ])?;
        for e in &report.curves {
            w.write_record([
                e.global_epoch.to_string(),
                e.iteration.to_string(),
                e.train_loss.total.to_string(),
                e.student_val_acc.to_string(),
                e.teacher_val_acc.to_string(),
                opt(e.test_acc),
            ])?;
        }
        Ok(())
    })?;

    let filter = csv_bytes(|w| {
        w.write_record(["iteration", "active_count", "precision", "recall"])?;
        for it in &report.iterations {
            w.write_record([
                it.iteration.to_string(),
                it.active_count_before.to_string(),
                it.filter_precision.to_string(),
                it.filter_recall.to_string(),
            ])?;
        }
        Ok(())
    })?;

    write_atomic(&out.join(CURVES_FILE), &curves)?;
    write_atomic(&out.join(FILTER_FILE), &filter)?;
    write_atomic(&out.join(SUMMARY_FILE), &json)
}

/// Reads back a `summary.json` written by [`emit_report`].
pub fn read_report(dir: impl AsRef<Path>) -> Result<RunReport> {
    let path = dir.as_ref().join(SUMMARY_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let report: RunReport =
        serde_json::from_slice(&bytes).map_err(|e| Error::load(&path, e.to_string()))?;
    if report.schema_version != super::SCHEMA_VERSION {
        return Err(Error::load(
            &path,
            format!("unsupported schema version {}", report.schema_version),
        ));
    }
    Ok(report)
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub final_test_acc: Option<f64>,
    pub best_iteration: Option<usize>,
    pub iterations: usize,
    pub final_active_count: Option<usize>,
    pub final_precision: Option<f64>,
    pub final_recall: Option<f64>,
    pub epochs_used: usize,
    pub aborted: bool,
}

impl From<&RunReport> for AblationRow {
    fn from(r: &RunReport) -> Self {
        Self {
            variant: r.variant,
            final_test_acc: r.final_test_acc,
            best_iteration: r.best_iteration,
            iterations: r.iterations.len(),
            final_active_count: r.final_active_count,
            final_precision: r.final_precision,
            final_recall: r.final_recall,
            epochs_used: r.epochs_used,
            aborted: r.abort.is_some(),
        }
    }
}

/// Runs every variant on the seeds of `base`, one after another.
///
/// With `out_dir`, each report goes to `out_dir/<variant>/` and the table to
/// `out_dir/table.csv`.
pub fn run_ablation_suite(
    base: &ExperimentConfig,
    variants: &[Variant],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::Config("no variants requested".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut cfg = base.clone();
        cfg.variant = variant;
        if let Some(dir) = &base.checkpoint_dir {
            cfg.checkpoint_dir = Some(dir.join(variant.name()));
        }
        let report = run_experiment(&cfg)?;
        if let Some(out) = out_dir {
            emit_report(&report, out.join(variant.name()))?;
        }
        rows.push(AblationRow::from(&report));
    }
    if let Some(out) = out_dir {
        write_atomic(&out.join(TABLE_FILE), &ablation_csv(&rows)?)?;
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record([
            "variant",
            "final_test_acc",
            "best_iteration",
            "iterations",
            "final_active_count",
            "final_precision",
            "final_recall",
            "epochs_used",
            "aborted",
        ])?;
        for r in rows {
            w.write_record([
                r.variant.name().to_string(),
                opt(r.final_test_acc),
                opt(r.best_iteration),
                r.iterations.to_string(),
                opt(r.final_active_count),
                opt(r.final_precision),
                opt(r.final_recall),
                r.epochs_used.to_string(),
                r.aborted.to_string(),
            ])?;
        }
        Ok(())
    })
}
