use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hpcnn_cli::config::{CompareFile, DataSource, ReportFormat, RunConfig};
use hpcnn_cli::CliResult;
use hpcnn_core::model::ModelName;
use hpcnn_core::PerfConfig;

#[derive(Parser)]
#[command(name = "hpcnn", version, about = "Train CNNs on CIFAR-10 and compare performance configurations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its report and artifacts.
    Run(Box<RunArgs>),
    /// Run every configuration in a TOML config-list file and tabulate them.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    On,
    Off,
}

#[derive(Args)]
struct Output {
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Report format: markdown, csv or json.
    #[arg(long, default_value = "markdown")]
    format: ReportFormat,
    /// File storing autotuner timings across runs.
    #[arg(long)]
    tune_cache: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "resnet18")]
    model: ModelName,
    #[arg(long)]
    epochs: usize,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Comma-separated epochs at which the learning rate decays.
    #[arg(long, value_delimiter = ',')]
    milestones: Option<Vec<usize>>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Preset: "on" = 4 threads + autotune, "off" = 1 thread + static UNROLL.
    #[arg(long)]
    hpc: Option<Preset>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    autotune: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
    /// Directory with the CIFAR-10 binary batches.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    data_dir: Option<PathBuf>,
    /// Use generated class-separable images instead of CIFAR-10.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 5000)]
    synthetic_train: usize,
    #[arg(long, default_value_t = 1000)]
    synthetic_test: usize,
    /// Per-class cap on training images.
    #[arg(long)]
    subset: Option<usize>,
    /// Per-class cap on test images.
    #[arg(long)]
    test_subset: Option<usize>,
    #[arg(long)]
    seed: u64,
    /// Stop each epoch after this many batches.
    #[arg(long)]
    max_batches: Option<usize>,
    /// Row label in the report.
    #[arg(long)]
    label: Option<String>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct CompareArgs {
    /// TOML file with a [shared] table and one [[run]] table per configuration.
    config: PathBuf,
    #[command(flatten)]
    output: Output,
}

impl RunArgs {
    fn to_config(&self) -> RunConfig {
        let data = match &self.data_dir {
            Some(dir) => DataSource::Cifar10 { dir: dir.clone() },
            None => DataSource::Synthetic { train: self.synthetic_train, test: self.synthetic_test },
        };
        let mut c = RunConfig::new(self.model, data, self.seed);
        if let Some(p) = self.hpc {
            let perf = match p {
                Preset::On => PerfConfig::hpc_on(),
                Preset::Off => PerfConfig::hpc_off(),
            };
            c.threads = perf.num_threads;
            c.autotune = perf.autotune;
        }
        c.label = self.label.clone();
        c.epochs = self.epochs;
        c.subset = self.subset;
        c.test_subset = self.test_subset;
        c.max_batches = self.max_batches;
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.lr = self.lr.unwrap_or(c.lr);
        c.momentum = self.momentum.unwrap_or(c.momentum);
        c.weight_decay = self.weight_decay.unwrap_or(c.weight_decay);
        c.milestones = self.milestones.clone().unwrap_or(c.milestones);
        c.gamma = self.gamma.unwrap_or(c.gamma);
        c.threads = self.threads.unwrap_or(c.threads);
        c.autotune = self.autotune.unwrap_or(c.autotune);
        c.deterministic = self.deterministic.unwrap_or(c.deterministic);
        c
    }
}

fn dispatch(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.to_config();
            let o = &args.output;
            hpcnn_cli::run(&cfg, &o.out, o.format, o.tune_cache.as_deref())?.render(o.format)
        }
        Command::Compare(args) => {
            let cfgs = CompareFile::load(&args.config)?.configs()?;
            let o = &args.output;
            hpcnn_cli::compare(&cfgs, &o.out, o.format, o.tune_cache.as_deref())?.render(o.format)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
