//! Command-line front end: corpus generation, cascade execution, scoring,
//! report rendering, and the loss self-test.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

mod commands;
mod config;
mod scripting;

pub use config::{BackendKind, ExpertKind, MpoSettings, RunConfig};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

/// Errors split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid flags or configuration; exit code 2.
    Config(String),
    /// Failure while doing the work; exit code 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(err: anyhow::Error) -> Self {
        CliError::Runtime(err)
    }
}

impl From<occot::Error> for CliError {
    fn from(err: occot::Error) -> Self {
        CliError::Runtime(err.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Mock,
    Fixture,
    Http,
}

impl From<BackendArg> for BackendKind {
    fn from(value: BackendArg) -> Self {
        match value {
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Fixture => BackendKind::Fixture,
            BackendArg::Http => BackendKind::Http,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DescriptionSourceArg {
    /// Use the standalone recognition probe recorded on each run.
    Probe,
    /// Use the run's final answer, counted only for clear reflections.
    RunDirect,
}

impl From<DescriptionSourceArg> for occot::eval::DescriptionSource {
    fn from(value: DescriptionSourceArg) -> Self {
        match value {
            DescriptionSourceArg::Probe => occot::eval::DescriptionSource::Probe,
            DescriptionSourceArg::RunDirect => occot::eval::DescriptionSource::RunDirect,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "occot",
    version,
    about = "Staged chain-of-thought recognition of occluded hand-held objects"
)]
struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seed-deterministic corpus: object records, five-step
    /// annotations, and preference pairs.
    GenData {
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Generator seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the three corpus files.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Occlusion ratio at or above which clarity gold is "no".
        #[arg(long)]
        clarity_threshold: Option<f64>,
        /// JSON file overriding the category-to-attributes table.
        #[arg(long, value_name = "FILE")]
        attribute_table: Option<PathBuf>,
    },
    /// Execute the reasoning cascade over object records, writing one run
    /// record per sample.
    Run {
        /// Input object records (JSONL).
        #[arg(long, value_name = "FILE")]
        records: PathBuf,
        /// Output runs file (JSONL).
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Model backend.
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
        /// Gold annotations (JSONL); required by the mock backend.
        #[arg(long, value_name = "FILE")]
        annotations: Option<PathBuf>,
        /// Answer corruption probability for the mock backend.
        #[arg(long)]
        noise: Option<f64>,
        /// Recorded fixture (JSONL); required by the fixture backend.
        #[arg(long, value_name = "FILE")]
        fixture: Option<PathBuf>,
        /// HTTP backend base URL.
        #[arg(long)]
        base_url: Option<String>,
        /// HTTP backend model name.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Bounded worker count for batch execution.
        #[arg(long)]
        workers: Option<usize>,
        /// Disable expert gating (the expert is never invoked).
        #[arg(long)]
        no_expert: bool,
        /// Skip the standalone recognition probe.
        #[arg(long)]
        no_probe: bool,
        /// Simulated expert failure rate.
        #[arg(long)]
        expert_failure_rate: Option<f64>,
    },
    /// Score recorded runs against gold annotations and write report files.
    Eval {
        /// Runs file (JSONL).
        #[arg(long, value_name = "FILE")]
        runs: PathBuf,
        /// Gold annotations (JSONL).
        #[arg(long, value_name = "FILE")]
        annotations: PathBuf,
        /// Output directory for report.md / report.csv / report.json.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value = "model")]
        model_label: String,
        #[arg(long, default_value = "default")]
        setting_label: String,
        /// Source of the description score's direct answer.
        #[arg(long, value_enum)]
        description_source: Option<DescriptionSourceArg>,
        /// Baseline rows (JSON array) for the improvement column.
        #[arg(long, value_name = "FILE")]
        baselines: Option<PathBuf>,
        /// Normalized-answer synonym map (JSON object), applied before
        /// exact matching.
        #[arg(long, value_name = "FILE")]
        synonyms: Option<PathBuf>,
        #[arg(long)]
        clarity_threshold: Option<f64>,
    },
    /// Render comparison tables from score reports, or from the bundled
    /// fixture.
    Report {
        /// Output directory for report.md / report.csv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Bundled fixture name (`table1`).
        #[arg(long, value_name = "NAME", conflicts_with_all = ["reports", "baselines"])]
        fixture: Option<String>,
        /// Score report files (JSON arrays), merged in order.
        #[arg(long, value_name = "FILE", num_args = 1..)]
        reports: Vec<PathBuf>,
        /// Baseline rows (JSON array).
        #[arg(long, value_name = "FILE")]
        baselines: Option<PathBuf>,
    },
    /// Evaluate every loss unit value and verify analytic gradients against
    /// central finite differences; nonzero exit on any failure.
    LossSelftest {
        /// Random gradient-check points per loss.
        #[arg(long, default_value_t = 100)]
        points: usize,
        /// Central-difference step size.
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// KL penalty coefficient for the configured-hyperparameter checks.
        #[arg(long)]
        beta: Option<f64>,
        /// Reward shift for the configured-hyperparameter checks.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        w_p: Option<f64>,
        #[arg(long)]
        w_q: Option<f64>,
        #[arg(long)]
        w_g: Option<f64>,
        #[arg(long)]
        alpha_r: Option<f64>,
        #[arg(long)]
        alpha_l: Option<f64>,
        #[arg(long)]
        alpha_t: Option<f64>,
        #[arg(long)]
        lambda_sr: Option<f64>,
        #[arg(long)]
        lambda_fd: Option<f64>,
    },
}

/// Parses `argv` and runs the selected command, returning the process exit
/// code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return err.exit_code();
        }
    };

    let result = match RunConfig::load(cli.config.as_deref()) {
        Ok(config) => commands::execute(cli.command, config),
        Err(err) => Err(err),
    };

    match result {
        Ok(()) => 0,
        Err(CliError::Config(message)) => {
            eprintln!("config error: {message}");
            2
        }
        Err(CliError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            1
        }
    }
}
