//! Comparison tables and a text summary over one or more run directories.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{files, DiagnosticRow, MetricsRow, TraceSummary};
use crate::store::{self, Manifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionPoint {
    pub config_hash: String,
    pub dataset: String,
    pub recommender: String,
    pub strategy: String,
    pub simulator: String,
    pub round: usize,
    pub cum_precision: String,
}

impl PrecisionPoint {
    pub const COLUMNS: [&'static str; 7] =
        ["config_hash", "dataset", "recommender", "strategy", "simulator", "round", "cum_precision"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationRow {
    pub config_hash: String,
    pub dataset: String,
    pub users: usize,
    pub discrepancies: usize,
    pub batches: usize,
    pub mean_final_version: String,
    pub inaccurate: usize,
    pub incomplete: usize,
    pub both: usize,
    pub aborted: usize,
}

impl OptimizationRow {
    pub const COLUMNS: [&'static str; 10] = [
        "config_hash",
        "dataset",
        "users",
        "discrepancies",
        "batches",
        "mean_final_version",
        "inaccurate",
        "incomplete",
        "both",
        "aborted",
    ];
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub runs: Vec<Manifest>,
    pub metrics: Vec<MetricsRow>,
    pub precision: Vec<PrecisionPoint>,
    pub optimization: Vec<OptimizationRow>,
    pub diagnostic: Vec<DiagnosticRow>,
}

/// Reads an optional CSV artifact, insisting on the exact expected columns.
fn read_table<T: serde::de::DeserializeOwned>(dir: &Path, name: &str, columns: &[&str]) -> Result<Vec<T>> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
    let headers = r.headers().map_err(|e| Error::MalformedRecord {
        path: path.clone(),
        line: 1,
        reason: e.to_string(),
    })?;
    let found: Vec<&str> = headers.iter().collect();
    if found != columns {
        return Err(Error::Precondition(format!(
            "{} has columns {:?}, expected {:?}; runs from different schemas cannot be combined",
            path.display(),
            found,
            columns
        )));
    }
    store::read_csv(&path)
}

pub fn collect(run_dirs: &[PathBuf]) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(Error::Config(vec!["report needs at least one run directory".into()]));
    }
    let mut report = Report::default();
    for dir in run_dirs {
        let m = Manifest::load(dir)?
            .ok_or_else(|| Error::Precondition(format!("{} is not a run directory (no manifest)", dir.display())))?;
        if let Some(first) = report.runs.first() {
            if first.schema != m.schema {
                return Err(Error::Precondition(format!(
                    "mixed schemas: {} is schema {}, {} is schema {}",
                    run_dirs[0].display(),
                    first.schema,
                    dir.display(),
                    m.schema
                )));
            }
        }
        let metrics: Vec<MetricsRow> = read_table(dir, files::METRICS, &MetricsRow::COLUMNS)?;
        let summary: Vec<TraceSummary> = read_table(dir, files::OPTIMIZE_SUMMARY, &TraceSummary::COLUMNS)?;
        let diagnostic: Vec<DiagnosticRow> = read_table(dir, files::DIAGNOSTIC, &DiagnosticRow::COLUMNS)?;

        for row in &metrics {
            if let Ok(round) = row.round.parse() {
                report.precision.push(PrecisionPoint {
                    config_hash: row.config_hash.clone(),
                    dataset: row.dataset.clone(),
                    recommender: row.recommender.clone(),
                    strategy: row.strategy.clone(),
                    simulator: row.simulator.clone(),
                    round,
                    cum_precision: row.cum_precision.clone(),
                });
            }
        }
        if !summary.is_empty() {
            let versions: u64 = summary.iter().map(|s| s.final_version as u64).sum();
            report.optimization.push(OptimizationRow {
                config_hash: m.config_hash.clone(),
                dataset: m.dataset.clone(),
                users: summary.len(),
                discrepancies: summary.iter().map(|s| s.discrepancies).sum(),
                batches: summary.iter().map(|s| s.batches).sum(),
                mean_final_version: format!("{:.6}", versions as f64 / summary.len() as f64),
                inaccurate: summary.iter().map(|s| s.inaccurate).sum(),
                incomplete: summary.iter().map(|s| s.incomplete).sum(),
                both: summary.iter().map(|s| s.both).sum(),
                aborted: summary.iter().filter(|s| s.aborted).count(),
            });
        }
        report.metrics.extend(metrics);
        report.diagnostic.extend(diagnostic);
        report.runs.push(m);
    }
    Ok(report)
}

impl Report {
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Runs");
        for m in &self.runs {
            let _ = writeln!(
                s,
                "  {}  dataset={} seed={} users={} stages={}",
                m.config_hash,
                m.dataset,
                m.seed,
                m.sampled_users.len(),
                m.completed.join(",")
            );
        }

        let _ = writeln!(s, "\nProfile optimization");
        for o in &self.optimization {
            let _ = writeln!(
                s,
                "  {}  users={} discrepancies={} batches={} inaccurate={} incomplete={} both={} aborted={} mean_version={}",
                o.config_hash,
                o.users,
                o.discrepancies,
                o.batches,
                o.inaccurate,
                o.incomplete,
                o.both,
                o.aborted,
                o.mean_final_version
            );
        }

        let _ = writeln!(s, "\nDiagnosis");
        for d in &self.diagnostic {
            let _ = writeln!(s, "  {}  {} n={} accuracy={}", d.config_hash, d.diagnoser, d.n, d.accuracy);
        }

        let _ = writeln!(s, "\nArena metrics (all rounds)");
        let totals: Vec<&MetricsRow> = self.metrics.iter().filter(|r| r.round == "all").collect();
        if !totals.is_empty() {
            let _ = writeln!(
                s,
                "  {:<16} {:<14} {:<12} {:<10} {:>9} {:>9} {:>9} {:>9} {:>9}",
                "run", "recommender", "strategy", "simulator", "precision", "recall", "accuracy", "f1", "sel_prec"
            );
        }
        for r in totals {
            let _ = writeln!(
                s,
                "  {:<16} {:<14} {:<12} {:<10} {:>9} {:>9} {:>9} {:>9} {:>9}",
                r.config_hash,
                r.recommender,
                r.strategy,
                r.simulator,
                r.precision,
                r.recall,
                r.accuracy,
                r.f1,
                r.sel_precision
            );
        }
        s
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let put = |name: &str, bytes: Vec<u8>| store::write_atomic(&out.join(name), &bytes);
        put("metrics.csv", store::csv_bytes(&self.metrics, &MetricsRow::COLUMNS)?)?;
        put("precision_series.csv", store::csv_bytes(&self.precision, &PrecisionPoint::COLUMNS)?)?;
        put("optimization.csv", store::csv_bytes(&self.optimization, &OptimizationRow::COLUMNS)?)?;
        put("diagnostic.csv", store::csv_bytes(&self.diagnostic, &DiagnosticRow::COLUMNS)?)?;
        put("summary.txt", self.summary_text().into_bytes())
    }

    /// Distinct values of a metrics column, for quick checks.
    pub fn distinct(&self, f: impl Fn(&MetricsRow) -> &str) -> BTreeSet<String> {
        self.metrics.iter().map(|r| f(r).to_string()).collect()
    }
}

pub fn build(run_dirs: &[PathBuf], out: &Path) -> Result<Report> {
    let report = collect(run_dirs)?;
    report.write(out)?;
    Ok(report)
}
