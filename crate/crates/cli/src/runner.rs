//! Executes configurations and writes their artifacts.

use std::path::{Path, PathBuf};

use hpcnn_core::autotune::TuneCache;
use hpcnn_core::data::{derive_seed, load_cifar10, stratified_subset, synthetic_dataset, Dataset, CLASS_NAMES, NUM_CLASSES};
use hpcnn_core::metrics::{compute_metrics, MetricsReport};
use hpcnn_core::model::build_model;
use hpcnn_core::train::{checkpoint_save, TrainState};
use hpcnn_core::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{DataSource, ReportFormat, RunConfig};
use crate::error::{CliError, CliResult};
use crate::report::{confusion_csv, confusion_normalized_csv, curves_csv, write_text, BenchReport, BenchRow, Machine};

const SYNTH_TRAIN_STREAM: u64 = 0x5EED_0001;
const SYNTH_TEST_STREAM: u64 = 0x5EED_0002;

pub fn load_data(cfg: &RunConfig) -> CliResult<Dataset> {
    let mut data = match &cfg.data {
        DataSource::Cifar10 { dir } => load_cifar10(dir).map_err(CliError::Data)?,
        DataSource::Synthetic { train, test } => {
            let gen = |n, stream| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stream]));
                synthetic_dataset(NUM_CLASSES, n, &mut rng).map_err(CliError::Data)
            };
            Dataset { train: gen(*train, SYNTH_TRAIN_STREAM)?, test: gen(*test, SYNTH_TEST_STREAM)? }
        }
    };
    if let Some(k) = cfg.subset {
        data.train = stratified_subset(&data.train, k, cfg.seed);
    }
    if let Some(k) = cfg.test_subset {
        data.test = stratified_subset(&data.test, k, cfg.seed);
    }
    if data.test.is_empty() {
        return Err(CliError::Data(hpcnn_core::Error::Empty("test set")));
    }
    Ok(data)
}

/// A finished run held in memory.
pub struct RunOutcome {
    pub config: RunConfig,
    pub config_hash: String,
    pub state: TrainState,
    pub metrics: MetricsReport,
    pub tune_cache: Option<TuneCache>,
    pub row: BenchRow,
}

/// Trains and evaluates `cfg` on already loaded data.
pub fn execute_on(cfg: &RunConfig, data: &Dataset, tune_cache: Option<TuneCache>) -> CliResult<RunOutcome> {
    cfg.validate()?;
    let config_hash = cfg.hash()?;
    let perf = cfg.perf_config();
    let engine = match tune_cache {
        Some(c) => Engine::with_tune_cache(&perf, c)?,
        None => Engine::new(&perf)?,
    };
    let model = build_model::<f32>(cfg.model, NUM_CLASSES, cfg.seed)?;
    let mut state = TrainState::new(model, cfg.seed);
    log::info!("{}: {} train / {} test images, config {config_hash}", cfg.display_label(), data.train.len(), data.test.len());
    state.run_epochs(&data.train, &data.test, &cfg.train_config(), &engine, cfg.epochs).map_err(CliError::Run)?;
    let cm = state.last_eval.clone().expect("at least one epoch was evaluated");
    let metrics = compute_metrics(&cm).map_err(CliError::Run)?;
    let row = BenchRow {
        configuration: cfg.display_label(),
        epochs: state.epoch,
        test_acc: metrics.accuracy,
        precision: metrics.macro_precision,
        recall: metrics.macro_recall,
        f1: metrics.macro_f1,
        training_time_s: state.total_time_s(),
        train_time_s: state.train_time_s(),
        eval_time_s: state.eval_time_s(),
        speedup: None,
        seed: cfg.seed,
        config_hash: config_hash.clone(),
    };
    Ok(RunOutcome { config: cfg.clone(), config_hash, state, metrics, tune_cache: engine.tuner().map(|t| t.cache()), row })
}

pub fn execute(cfg: &RunConfig, tune_cache: Option<TuneCache>) -> CliResult<RunOutcome> {
    let data = load_data(cfg)?;
    execute_on(cfg, &data, tune_cache)
}

/// Paths of the files written for one run.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub report: PathBuf,
    pub curves: PathBuf,
    pub confusion: PathBuf,
    pub confusion_normalized: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

pub fn write_artifacts(outcome: &RunOutcome, machine: &Machine, dir: &Path, format: ReportFormat) -> CliResult<Artifacts> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e))?;
    let a = Artifacts {
        report: dir.join(format!("report.{}", format.extension())),
        curves: dir.join("curves.csv"),
        confusion: dir.join("confusion.csv"),
        confusion_normalized: dir.join("confusion_normalized.csv"),
        metrics: dir.join("metrics.json"),
        checkpoint: dir.join("checkpoint.bin"),
    };
    let (seed, hash) = (outcome.config.seed, outcome.config_hash.as_str());
    let report = BenchReport { machine: machine.clone(), rows: vec![outcome.row.clone()] };
    write_text(&a.report, &report.render(format)?)?;
    write_text(&a.curves, &curves_csv(&outcome.state.history, seed, hash)?)?;
    let cm = outcome.state.last_eval.as_ref().expect("evaluated run");
    write_text(&a.confusion, &confusion_csv(cm, seed, hash)?)?;
    write_text(&a.confusion_normalized, &confusion_normalized_csv(cm, seed, hash)?)?;

    let per_class: Vec<_> = outcome
        .metrics
        .per_class
        .iter()
        .enumerate()
        .map(|(c, m)| json!({"class": CLASS_NAMES.get(c), "precision": m.precision, "recall": m.recall, "f1": m.f1, "support": m.support, "degenerate": m.degenerate}))
        .collect();
    let tuning: Option<Vec<_>> = outcome.tune_cache.as_ref().map(|c| {
        c.iter()
            .map(|(sig, e)| json!({"signature": sig, "chosen": e.chosen.name(), "direct_s": e.direct_s, "unroll_s": e.unroll_s, "warning": e.warning}))
            .collect()
    });
    let m = &outcome.metrics;
    let doc = json!({
        "seed": seed,
        "config_hash": hash,
        "config": outcome.config,
        "machine": machine,
        "accuracy": m.accuracy,
        "macro": {"precision": m.macro_precision, "recall": m.macro_recall, "f1": m.macro_f1},
        "weighted": {"precision": m.weighted_precision, "recall": m.weighted_recall, "f1": m.weighted_f1},
        "per_class": per_class,
        "time_s": {"total": outcome.row.training_time_s, "train": outcome.row.train_time_s, "eval": outcome.row.eval_time_s},
        "history": outcome.state.history,
        "autotune": tuning,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::output(&a.metrics, e))?;
    write_text(&a.metrics, &text)?;
    checkpoint_save(&outcome.state, outcome.config.model, hash, &a.checkpoint).map_err(|e| CliError::output(&a.checkpoint, e))?;
    Ok(a)
}

fn load_tune_cache(path: Option<&Path>) -> CliResult<Option<TuneCache>> {
    match path {
        Some(p) if p.exists() => Ok(Some(TuneCache::load(p).map_err(|e| CliError::Config(format!("tune cache {}: {e}", p.display())))?)),
        _ => Ok(None),
    }
}

fn save_tune_cache(path: Option<&Path>, outcome: &RunOutcome) -> CliResult<()> {
    if let (Some(p), Some(c)) = (path, &outcome.tune_cache) {
        c.save(p).map_err(|e| CliError::output(p, e))?;
    }
    Ok(())
}

/// `run`: one configuration, artifacts in `out`.
pub fn run(cfg: &RunConfig, out: &Path, format: ReportFormat, tune_cache: Option<&Path>) -> CliResult<BenchReport> {
    cfg.validate()?;
    let outcome = execute(cfg, load_tune_cache(tune_cache)?)?;
    save_tune_cache(tune_cache, &outcome)?;
    let machine = Machine::detect();
    write_artifacts(&outcome, &machine, out, format)?;
    Ok(BenchReport { machine, rows: vec![outcome.row] })
}

/// `compare`: runs sequentially on the same data, writes per-run artifacts
/// under `out/run-<i>` and the combined table with speedups to `out/report.*`.
pub fn compare(cfgs: &[RunConfig], out: &Path, format: ReportFormat, tune_cache: Option<&Path>) -> CliResult<BenchReport> {
    let first = cfgs.first().ok_or_else(|| CliError::Config("nothing to compare".into()))?;
    for c in cfgs {
        c.validate()?;
        if (c.seed, &c.data, c.subset, c.test_subset) != (first.seed, &first.data, first.subset, first.test_subset) {
            return Err(CliError::Config("compared runs must share seed and data".into()));
        }
    }
    let data = load_data(first)?;
    let machine = Machine::detect();
    let mut rows = Vec::new();
    for (i, cfg) in cfgs.iter().enumerate() {
        let outcome = execute_on(cfg, &data, load_tune_cache(tune_cache)?)?;
        save_tune_cache(tune_cache, &outcome)?;
        write_artifacts(&outcome, &machine, &out.join(format!("run-{}", i + 1)), format)?;
        rows.push(outcome.row);
    }
    let report = BenchReport { machine, rows }.with_speedups();
    write_text(&out.join(format!("report.{}", format.extension())), &report.render(format)?)?;
    Ok(report)
}
