//! Run outputs: the per-round metrics CSV, the summary JSON, the partition
//! dump, and the record-store checkpoint.
//!
//! The CSV schema is fixed and versioned: a constant `schema` column, the
//! round index, one weight column per registered client, loss and accuracy
//! columns, the pairing log, the skew diagnostics, and wall-clock time.
//! Every value is written with Rust's shortest-roundtrip float formatting,
//! so identical runs produce byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::csr::CsrStore;
use crate::data::Partition;
use crate::engine::{rta, RoundReport};
use crate::error::{Error, Result};

pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// Column names for the metrics CSV given the number of registered clients.
pub fn csv_header(num_clients: usize) -> Vec<String> {
    let mut cols = vec!["schema".to_string(), "round".to_string()];
    for c in 0..num_clients {
        cols.push(format!("w_{c}"));
    }
    for fixed in [
        "task_loss",
        "kd_c_loss",
        "kd_g_loss",
        "acc_global",
        "acc_aux",
        "critical_rate",
        "biased_clients",
        "matching",
        "skew_pre",
        "skew_post",
        "wall_clock_ms",
    ] {
        cols.push(fixed.to_string());
    }
    cols
}

fn encode_biased(clients: &[usize]) -> String {
    clients
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join("|")
}

fn encode_ratios(ratios: &[(usize, f64)]) -> String {
    ratios
        .iter()
        .map(|(class, rho)| format!("{class}:{rho}"))
        .collect::<Vec<_>>()
        .join("|")
}

fn encode_matching(report: &RoundReport) -> String {
    report
        .matching
        .iter()
        .map(|p| {
            format!(
                "{}-{}:g={}:ab=[{}]:ba=[{}]",
                p.a,
                p.b,
                p.gain,
                encode_ratios(&p.ratios_ab),
                encode_ratios(&p.ratios_ba)
            )
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn csv_row(report: &RoundReport) -> Vec<String> {
    let mut row = vec![CSV_SCHEMA_VERSION.to_string(), report.round.to_string()];
    for w in &report.weights {
        row.push(w.to_string());
    }
    row.push(report.task_loss.to_string());
    row.push(report.kd_client_loss.to_string());
    row.push(report.kd_global_loss.to_string());
    row.push(report.global_accuracy.to_string());
    row.push(report.aux_accuracy.to_string());
    row.push(report.critical_rate.to_string());
    row.push(encode_biased(&report.biased_clients));
    row.push(encode_matching(report));
    row.push(report.skew_pre.to_string());
    row.push(report.skew_post.to_string());
    row.push(report.wall_clock_ms.to_string());
    row
}

pub fn write_metrics_csv(path: &Path, reports: &[RoundReport], num_clients: usize) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    let wrap = |source: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    writer.write_record(csv_header(num_clients)).map_err(wrap)?;
    for report in reports {
        writer.write_record(csv_row(report)).map_err(wrap)?;
    }
    writer.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Serialize)]
struct TargetEntry {
    target: f64,
    round: Option<usize>,
    tta_ms: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    schema_version: u32,
    csv_schema_version: u32,
    config: &'a ExperimentConfig,
    rounds_completed: usize,
    final_accuracy: f64,
    final_aux_accuracy: f64,
    final_critical_rate: f64,
    final_task_loss: f64,
    rta: Vec<TargetEntry>,
}

/// Builds the summary: final metrics plus the rounds-to-accuracy table with
/// cumulative wall-clock per reached target.
fn summary<'a>(cfg: &'a ExperimentConfig, reports: &[RoundReport]) -> Summary<'a> {
    let accuracy: Vec<f64> = reports.iter().map(|r| r.global_accuracy).collect();
    let mut cumulative_ms = Vec::with_capacity(reports.len());
    let mut acc_ms = 0.0;
    for r in reports {
        acc_ms += r.wall_clock_ms;
        cumulative_ms.push(acc_ms);
    }
    let rta_entries = cfg
        .rta_targets
        .iter()
        .map(|&target| {
            let round = rta(&accuracy, target);
            TargetEntry {
                target,
                round,
                tta_ms: round.map(|r| cumulative_ms[r - 1]),
            }
        })
        .collect();
    let last = reports.last().expect("nonempty reports");
    Summary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        csv_schema_version: CSV_SCHEMA_VERSION,
        config: cfg,
        rounds_completed: reports.len(),
        final_accuracy: last.global_accuracy,
        final_aux_accuracy: last.aux_accuracy,
        final_critical_rate: last.critical_rate,
        final_task_loss: last.task_loss,
        rta: rta_entries,
    }
}

pub fn write_summary_json(
    path: &Path,
    cfg: &ExperimentConfig,
    reports: &[RoundReport],
) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Config(
            "cannot summarize an empty report list".into(),
        ));
    }
    let text =
        serde_json::to_string_pretty(&summary(cfg, reports)).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
    std::fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Paths of everything a run writes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunFiles {
    pub metrics_csv: PathBuf,
    pub summary_json: PathBuf,
    pub partition_json: PathBuf,
    pub csr_json: PathBuf,
}

/// Writes the four run artifacts into `dir`, creating it if needed.
pub fn emit_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    reports: &[RoundReport],
    partition: &Partition,
    store: &CsrStore,
) -> Result<RunFiles> {
    if reports.is_empty() {
        return Err(Error::Config(
            "cannot emit outputs for an empty report list".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let files = RunFiles {
        metrics_csv: dir.join("metrics.csv"),
        summary_json: dir.join("summary.json"),
        partition_json: dir.join("partition.json"),
        csr_json: dir.join("csr.json"),
    };
    write_metrics_csv(&files.metrics_csv, reports, cfg.clients)?;
    write_summary_json(&files.summary_json, cfg, reports)?;
    partition.write_json(&files.partition_json)?;
    store.write_snapshot(&files.csr_json)?;
    Ok(files)
}

/// Renders a short human-readable round line for console logging.
pub fn console_line(report: &RoundReport) -> String {
    let mut line = format!(
        "round {:>4}  loss {:>9.5}  acc {:>7.4}",
        report.round, report.task_loss, report.global_accuracy
    );
    if report.aux_accuracy > 0.0 {
        let _ = write!(line, "  aux {:>7.4}", report.aux_accuracy);
    }
    if !report.matching.is_empty() {
        let _ = write!(line, "  pairs {}", report.matching.len());
    }
    line
}
