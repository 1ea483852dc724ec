//! Run reports and their tabular renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{MetricSummary, PerfMatrix};
use crate::trainer::{RunArtifacts, SnapshotRecord, StageCounter, Timing, TraceRow};

pub const SCHEMA_VERSION: u32 = 1;

/// Above this many steps the trace goes to a sidecar CSV.
pub const TRACE_SIDECAR_STEPS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub library_version: String,
    pub strategy: String,
    pub config: RunConfig,
    pub metrics: MetricSummary,
    pub perf_matrix: PerfMatrix,
    pub counters: Vec<StageCounter>,
    pub snapshot_norms: Vec<SnapshotRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_csv: Option<String>,
    /// Wall-clock block; the only part that varies between identical runs.
    pub timing: Timing,
}

#[derive(Serialize)]
struct MetricBlock<'a> {
    metrics: &'a MetricSummary,
    perf_matrix: &'a PerfMatrix,
}

impl RunReport {
    pub fn new(config: &RunConfig, artifacts: &RunArtifacts) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            strategy: config.strategy().name.to_string(),
            config: config.clone(),
            metrics: MetricSummary::from_matrix(&artifacts.perf),
            perf_matrix: artifacts.perf.clone(),
            counters: artifacts.counters.clone(),
            snapshot_norms: artifacts.snapshots.clone(),
            trace: Some(artifacts.trace.clone()),
            trace_csv: None,
            timing: artifacts.timing.clone(),
        }
    }

    /// Metrics and score matrix serialized on their own.
    pub fn metric_block(&self) -> String {
        serde_json::to_string_pretty(&MetricBlock {
            metrics: &self.metrics,
            perf_matrix: &self.perf_matrix,
        })
        .expect("metric block serializes")
    }

    /// Writes the report; long traces go to `<stem>.trace.csv` beside it.
    pub fn write(mut self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        if let Some(trace) = self
            .trace
            .as_ref()
            .filter(|t| t.len() > TRACE_SIDECAR_STEPS)
        {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("report");
            let side = path.with_file_name(format!("{stem}.trace.csv"));
            crate::trainer::write_trace_csv(std::fs::File::create(&side)?, trace)?;
            self.trace = None;
            self.trace_csv = side.file_name().map(|n| n.to_string_lossy().into_owned());
        }
        let mut text = serde_json::to_string_pretty(&self).expect("report serializes");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let report: RunReport = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: malformed report: {e}", path.display())))?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported schema_version {}",
                path.display(),
                report.schema_version
            )));
        }
        if report.perf_matrix.n() != report.metrics.n {
            return Err(Error::Config(format!(
                "{}: malformed report: metric summary and score matrix disagree on task count",
                path.display()
            )));
        }
        Ok(report)
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

/// Markdown tables, one per task count, with an Imd and a Last row per run.
/// `Average` is the row mean; `Avg` the mean over the training trajectory.
pub fn render_markdown(rows: &[(String, &RunReport)]) -> String {
    let mut groups: BTreeMap<usize, Vec<&(String, &RunReport)>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.1.perf_matrix.n()).or_default().push(r);
    }
    let mut out = String::new();
    for (k, (n, members)) in groups.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "### {n} task{}\n", if *n == 1 { "" } else { "s" });
        let mut header = String::from("| Method | Metric |");
        let mut rule = String::from("|---|---|");
        for j in 1..=*n {
            let _ = write!(header, " T{j} |");
            rule.push_str("---:|");
        }
        header.push_str(" Average | Avg | BWT |");
        rule.push_str("---:|---:|---:|");
        let _ = writeln!(out, "{header}\n{rule}");
        for (label, report) in members.iter().map(|r| (&r.0, r.1)) {
            let pm = &report.perf_matrix;
            let m = &report.metrics;
            let mut imd_row = format!("| {label} | Imd |");
            let mut last_row = "| | Last |".to_string();
            for j in 1..=*n {
                let _ = write!(imd_row, " {} |", cell(pm.get(j, j)));
                let _ = write!(last_row, " {} |", cell(pm.get(*n, j)));
            }
            let _ = write!(imd_row, " {} | | |", cell(m.mean_imd()));
            let _ = write!(
                last_row,
                " {} | {} | {} |",
                cell(m.last),
                cell(m.avg),
                cell(m.bwt)
            );
            let _ = writeln!(out, "{imd_row}\n{last_row}");
        }
    }
    out
}

/// One metric row per report.
pub fn render_csv(rows: &[(String, &RunReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "source", "strategy", "n", "last", "avg", "avg_all", "bwt", "mean_imd",
    ])
    .map_err(|e| Error::Input(e.to_string()))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (label, r) in rows {
        let m = &r.metrics;
        w.write_record([
            label.clone(),
            r.strategy.clone(),
            m.n.to_string(),
            opt(m.last),
            opt(m.avg),
            opt(m.avg_all),
            opt(m.bwt),
            opt(m.mean_imd()),
        ])
        .map_err(|e| Error::Input(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
