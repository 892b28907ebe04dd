//! Run configurations and the compare config-list file.

use std::path::{Path, PathBuf};

use hpcnn_core::model::ModelName;
use hpcnn_core::train::{OptimizerConfig, SchedulerConfig, TrainConfig};
use hpcnn_core::PerfConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    /// Directory holding the six CIFAR-10 binary batch files.
    Cifar10 { dir: PathBuf },
    /// Class-conditional Gaussian blobs generated from the run seed.
    Synthetic { train: usize, test: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Markdown => "md",
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(format!("unknown format {s:?} (expected markdown, csv or json)")),
        }
    }
}

/// Everything that determines a run's numbers. The output location and
/// report format are not part of it, so they do not change the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub label: Option<String>,
    pub model: ModelName,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub threads: usize,
    pub autotune: bool,
    pub deterministic: bool,
    pub data: DataSource,
    /// Per-class cap on the training set.
    pub subset: Option<usize>,
    /// Per-class cap on the test set.
    pub test_subset: Option<usize>,
    pub seed: u64,
    pub max_batches: Option<usize>,
}

impl RunConfig {
    /// The tuned training defaults (350 epochs, batch 128, SGD lr 0.1,
    /// momentum 0.2, wd 5e-4, decay x0.1 at epochs 150 and 250) with the
    /// given seed, model and data.
    pub fn new(model: ModelName, data: DataSource, seed: u64) -> Self {
        let opt = OptimizerConfig::default();
        let sched = SchedulerConfig::default();
        let perf = PerfConfig::default();
        RunConfig {
            label: None,
            model,
            epochs: 350,
            batch_size: TrainConfig::default().batch_size,
            lr: opt.learning_rate,
            momentum: opt.momentum,
            weight_decay: opt.weight_decay,
            milestones: sched.milestones,
            gamma: sched.gamma,
            threads: perf.num_threads,
            autotune: perf.autotune,
            deterministic: perf.deterministic,
            data,
            subset: None,
            test_subset: None,
            seed,
            max_batches: None,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            optimizer: OptimizerConfig { learning_rate: self.lr, momentum: self.momentum, weight_decay: self.weight_decay },
            scheduler: SchedulerConfig { milestones: self.milestones.clone(), gamma: self.gamma },
            seed: self.seed,
            max_batches: self.max_batches,
        }
    }

    pub fn perf_config(&self) -> PerfConfig {
        PerfConfig { num_threads: self.threads, autotune: self.autotune, deterministic: self.deterministic, ..PerfConfig::default() }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.epochs < 1 {
            return Err(CliError::Config("epochs must be at least 1".into()));
        }
        if self.subset == Some(0) || self.test_subset == Some(0) {
            return Err(CliError::Config("subset caps must be at least 1".into()));
        }
        if self.max_batches == Some(0) {
            return Err(CliError::Config("max_batches must be at least 1".into()));
        }
        if let DataSource::Synthetic { train, test } = self.data {
            if train == 0 || test == 0 {
                return Err(CliError::Config("synthetic train and test sizes must be at least 1".into()));
            }
        }
        self.train_config().validate()?;
        self.perf_config().validate()?;
        Ok(())
    }

    /// Row label: the explicit one, else a name derived from the HPC preset.
    pub fn display_label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let name = self.model.display_name();
        let perf = self.perf_config();
        let on = PerfConfig::hpc_on();
        let off = PerfConfig::hpc_off();
        if (perf.num_threads, perf.autotune) == (on.num_threads, on.autotune) {
            format!("HPC tools & {name}")
        } else if (perf.num_threads, perf.autotune) == (off.num_threads, off.autotune) {
            format!("No HPC tools & {name}")
        } else {
            let tune = if perf.autotune { "autotune" } else { "static" };
            format!("{name} ({} threads, {tune})", perf.num_threads)
        }
    }

    pub fn hash(&self) -> CliResult<String> {
        Ok(hpcnn_core::io::config_hash(self)?)
    }
}

/// Optional overrides, used for both the `[defaults]` table and each
/// `[[run]]` entry of a compare file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPatch {
    pub label: Option<String>,
    pub model: Option<ModelName>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub milestones: Option<Vec<usize>>,
    pub gamma: Option<f64>,
    pub threads: Option<usize>,
    pub autotune: Option<bool>,
    pub deterministic: Option<bool>,
    pub max_batches: Option<usize>,
    /// `"on"` or `"off"`; sets threads and autotune together.
    pub hpc: Option<String>,
}

impl RunPatch {
    pub fn apply(&self, cfg: &mut RunConfig) -> CliResult<()> {
        if let Some(p) = &self.hpc {
            let preset = match p.as_str() {
                "on" => PerfConfig::hpc_on(),
                "off" => PerfConfig::hpc_off(),
                _ => return Err(CliError::Config(format!("hpc must be \"on\" or \"off\", got {p:?}"))),
            };
            cfg.threads = preset.num_threads;
            cfg.autotune = preset.autotune;
        }
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { cfg.$f = v.clone(); } )* };
        }
        set!(model, epochs, batch_size, lr, momentum, weight_decay, milestones, gamma, threads, autotune, deterministic);
        if self.label.is_some() {
            cfg.label = self.label.clone();
        }
        if self.max_batches.is_some() {
            cfg.max_batches = self.max_batches;
        }
        Ok(())
    }
}

/// Shared settings of a compare file: everything that must be identical
/// across the compared runs, plus default overrides.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareShared {
    pub seed: u64,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSize>,
    #[serde(default)]
    pub subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
    #[serde(flatten)]
    pub defaults: RunPatch,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSize {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareFile {
    pub shared: CompareShared,
    #[serde(rename = "run")]
    pub runs: Vec<RunPatch>,
}

impl CompareFile {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("compare file: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// One validated config per `[[run]]`, the first being the baseline.
    pub fn configs(&self) -> CliResult<Vec<RunConfig>> {
        if self.runs.is_empty() {
            return Err(CliError::Config("compare file has no [[run]] entries".into()));
        }
        let s = &self.shared;
        let data = match (&s.data_dir, s.synthetic) {
            (Some(dir), None) => DataSource::Cifar10 { dir: dir.clone() },
            (None, Some(sz)) => DataSource::Synthetic { train: sz.train, test: sz.test },
            _ => return Err(CliError::Config("compare file needs exactly one of data_dir or [shared.synthetic]".into())),
        };
        let mut base = RunConfig::new(ModelName::Resnet18, data, s.seed);
        base.subset = s.subset;
        base.test_subset = s.test_subset;
        s.defaults.apply(&mut base)?;
        self.runs
            .iter()
            .map(|patch| {
                let mut cfg = base.clone();
                patch.apply(&mut cfg)?;
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }
}
