//! Benchmark harness: trains configurations, compares them and writes
//! report tables, per-epoch curves, confusion matrices and checkpoints.

pub mod config;
pub mod error;
pub mod report;
pub mod runner;

pub use config::{CompareFile, DataSource, ReportFormat, RunConfig};
pub use error::{CliError, CliResult};
pub use report::{BenchReport, BenchRow, Machine, COLUMNS};
pub use runner::{compare, execute, run};
