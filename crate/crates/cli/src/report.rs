//! Report, curve and confusion-matrix emission.

use std::fmt::Write as _;
use std::path::Path;

use hpcnn_core::data::CLASS_NAMES;
use hpcnn_core::metrics::ConfusionMatrix;
use hpcnn_core::train::EpochRecord;
use serde::{Deserialize, Serialize};

use crate::config::ReportFormat;
use crate::error::{CliError, CliResult};

pub const COLUMNS: [&str; 7] = ["Configuration", "Epoch", "Test Acc", "Precision", "Recall", "F1 Score", "Training Time(s)"];
pub const SPEEDUP_COLUMN: &str = "Speedup";
pub const CURVE_COLUMNS: [&str; 6] = ["epoch", "train_loss", "train_acc", "test_loss", "test_acc", "epoch_time_s"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Machine {
    pub physical_cores: usize,
    pub logical_cpus: usize,
    pub os: String,
    pub arch: String,
}

impl Machine {
    pub fn detect() -> Self {
        Machine {
            physical_cores: num_cpus::get_physical(),
            logical_cpus: num_cpus::get(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }

    pub fn describe(&self) -> String {
        format!("{} {}, {} physical cores, {} logical CPUs", self.os, self.arch, self.physical_cores, self.logical_cpus)
    }
}

/// One configuration's result. Rates are fractions in [0, 1]; they are
/// rendered as percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub configuration: String,
    pub epochs: usize,
    pub test_acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Training plus per-epoch evaluation.
    pub training_time_s: f64,
    pub train_time_s: f64,
    pub eval_time_s: f64,
    pub speedup: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub machine: Machine,
    pub rows: Vec<BenchRow>,
}

fn pct(x: f64) -> String {
    format!("{:.3}", 100.0 * x)
}

impl BenchReport {
    /// Fills the speedup column relative to the first row.
    pub fn with_speedups(mut self) -> Self {
        if let Some(base) = self.rows.first().map(|r| r.training_time_s) {
            for r in &mut self.rows {
                r.speedup = Some(base / r.training_time_s);
            }
        }
        self
    }

    pub fn columns(&self) -> Vec<&'static str> {
        let mut c = COLUMNS.to_vec();
        if self.rows.iter().any(|r| r.speedup.is_some()) {
            c.push(SPEEDUP_COLUMN);
        }
        c
    }

    fn cells(&self, r: &BenchRow, percent_sign: bool) -> Vec<String> {
        let p = |x: f64| if percent_sign { format!("{}%", pct(x)) } else { pct(x) };
        let mut v = vec![
            r.configuration.clone(),
            r.epochs.to_string(),
            p(r.test_acc),
            p(r.precision),
            p(r.recall),
            p(r.f1),
            format!("{:.2}", r.training_time_s),
        ];
        if self.columns().len() > COLUMNS.len() {
            v.push(r.speedup.map(|s| format!("{s:.3}")).unwrap_or_default());
        }
        v
    }

    fn seeds(&self) -> String {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.dedup();
        s.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let cols = self.columns();
        let _ = writeln!(out, "Seed: {}  ", self.seeds());
        let _ = writeln!(out, "Machine: {}\n", self.machine.describe());
        let _ = writeln!(out, "| {} |", cols.join(" | "));
        let _ = writeln!(out, "|{}", cols.iter().map(|_| "---|").collect::<String>());
        for r in &self.rows {
            let _ = writeln!(out, "| {} |", self.cells(r, true).join(" | "));
        }
        let _ = writeln!(out, "\nConfig hashes:\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(out, "{}. {}: `{}` (train {:.2}s, eval {:.2}s)", i + 1, r.configuration, r.config_hash, r.train_time_s, r.eval_time_s);
        }
        out
    }

    pub fn to_csv(&self) -> CliResult<String> {
        let mut head = format!("# seed={}\n# machine={}\n", self.seeds(), self.machine.describe());
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(head, "# row{}: config_hash={} train_time_s={:.3} eval_time_s={:.3}", i + 1, r.config_hash, r.train_time_s, r.eval_time_s);
        }
        let mut w = csv::Writer::from_writer(head.into_bytes());
        let err = |e: csv::Error| CliError::output("report.csv", e);
        w.write_record(self.columns()).map_err(err)?;
        for r in &self.rows {
            w.write_record(self.cells(r, false)).map_err(err)?;
        }
        into_string(w)
    }

    pub fn to_json(&self) -> CliResult<String> {
        let rows: Vec<serde_json::Map<String, serde_json::Value>> = self
            .rows
            .iter()
            .map(|r| {
                let cells = self.cells(r, false);
                self.columns()
                    .iter()
                    .zip(cells)
                    .enumerate()
                    .map(|(i, (c, v))| {
                        let value = if i == 0 { serde_json::Value::String(v) } else { serde_json::from_str(&v).unwrap_or(serde_json::Value::Null) };
                        (c.to_string(), value)
                    })
                    .collect()
            })
            .collect();
        let meta: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| serde_json::json!({"seed": r.seed, "config_hash": r.config_hash, "train_time_s": r.train_time_s, "eval_time_s": r.eval_time_s}))
            .collect();
        let doc = serde_json::json!({
            "machine": self.machine,
            "columns": self.columns(),
            "rows": rows,
            "row_meta": meta,
        });
        serde_json::to_string_pretty(&doc).map_err(|e| CliError::output("report.json", e))
    }

    pub fn render(&self, format: ReportFormat) -> CliResult<String> {
        match format {
            ReportFormat::Markdown => Ok(self.to_markdown()),
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => self.to_json(),
        }
    }
}

fn into_string(w: csv::Writer<Vec<u8>>) -> CliResult<String> {
    let bytes = w.into_inner().map_err(|e| CliError::output("csv buffer", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `# key=value` lines understood as comments by common CSV readers.
fn meta_header(seed: u64, config_hash: &str) -> String {
    format!("# seed={seed}\n# config_hash={config_hash}\n")
}

pub fn curves_csv(history: &[EpochRecord], seed: u64, config_hash: &str) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(meta_header(seed, config_hash).into_bytes());
    let err = |e: csv::Error| CliError::output("curves.csv", e);
    w.write_record(CURVE_COLUMNS).map_err(err)?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.train_acc.to_string(),
            r.test_loss.to_string(),
            r.test_acc.to_string(),
            r.epoch_time_s().to_string(),
        ])
        .map_err(err)?;
    }
    into_string(w)
}

fn class_names(k: usize) -> Vec<String> {
    (0..k).map(|c| CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())).collect()
}

/// Raw counts, rows actual and columns predicted.
pub fn confusion_csv(cm: &ConfusionMatrix, seed: u64, config_hash: &str) -> CliResult<String> {
    let rows: Vec<Vec<String>> = (0..cm.num_classes()).map(|a| cm.row(a).iter().map(u64::to_string).collect()).collect();
    matrix_csv(cm.num_classes(), rows, seed, config_hash)
}

/// Row-normalized fractions; a class absent from the data gives a zero row.
pub fn confusion_normalized_csv(cm: &ConfusionMatrix, seed: u64, config_hash: &str) -> CliResult<String> {
    let rows = cm.normalized().into_iter().map(|r| r.iter().map(f64::to_string).collect()).collect();
    matrix_csv(cm.num_classes(), rows, seed, config_hash)
}

fn matrix_csv(k: usize, rows: Vec<Vec<String>>, seed: u64, config_hash: &str) -> CliResult<String> {
    let names = class_names(k);
    let mut w = csv::Writer::from_writer(meta_header(seed, config_hash).into_bytes());
    let err = |e: csv::Error| CliError::output("confusion.csv", e);
    let mut header = vec!["actual\\predicted".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(err)?;
    for (name, row) in names.into_iter().zip(rows) {
        let mut rec = vec![name];
        rec.extend(row);
        w.write_record(&rec).map_err(err)?;
    }
    into_string(w)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    hpcnn_core::io::write_atomic(path, text.as_bytes()).map_err(|e| CliError::output(path, e))
}
