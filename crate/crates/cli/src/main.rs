//! `delta-recourse`: train a weighted naive Bayes model, build its Δ knowledge
//! base, explain individuals, cluster the knowledge base and serve it.
//!
//! Exit codes: 0 success, 2 input error, 3 consistency error (artifacts that
//! do not belong together), 4 anything else.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use delta_recourse::delta::DeltaError;
use delta_recourse::explain::ExplainError;
use delta_recourse::nbmodel::WeightMode;
use delta_recourse::pipeline::PipelineError;
use delta_recourse_service::ServiceError;

use config::{parse_weight_mode, ClusterColumns, RunConfig, Slice};

/// Errors raised by the command layer itself.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("InvalidConfig: {0}")]
    Config(String),
    #[error("MissingArgument: {0}")]
    Missing(String),
    #[error("UnknownRowId: '{0}' is not in the knowledge base")]
    UnknownRowId(String),
    #[error("SplitMismatch: {0}")]
    SplitMismatch(String),
}

#[derive(Debug, Parser)]
#[command(name = "delta-recourse", version, about = "Counterfactual recourse from naive Bayes log-odds deltas")]
struct Cli {
    /// JSON run configuration; its keys mirror the flags, and flags win.
    #[arg(long, global = true, env = "DELTA_RECOURSE_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Discretize, fit and evaluate a model; writes model.json, split.json and train_report.json.
    Train(TrainArgs),
    /// Build the knowledge base of Δ values for a slice of a data file.
    Kb(KbArgs),
    /// Counterfactual or preventive trajectory for one individual.
    Explain(ExplainArgs),
    /// k-means over knowledge-base rows with elbow selection of k.
    Cluster(ClusterArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Output directory.
    #[arg(long = "out")]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep class proportions in the train/test split.
    #[arg(long)]
    stratify: bool,
    #[arg(long)]
    smoothing: Option<f64>,
    #[arg(long)]
    max_bins: Option<usize>,
    #[arg(long)]
    min_support: Option<usize>,
    #[arg(long)]
    merge_tolerance: Option<f64>,
    #[arg(long)]
    selection_fraction: Option<f64>,
    /// `select`, `uniform` or `fixed:w1,w2,...`
    #[arg(long = "weights", value_parser = parse_weight_mode)]
    weight_mode: Option<WeightMode>,
    /// Override the schema's positive label.
    #[arg(long)]
    positive_label: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct KbArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split file written by `train` (default: next to the model).
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, value_enum)]
    slice: Option<Slice>,
    /// Output CSV path (default: <out>/kb.csv).
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long = "out")]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
enum Format {
    #[default]
    Text,
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Knowledge-base row to explain.
    #[arg(long, conflicts_with = "record")]
    row_id: Option<String>,
    /// Raw record as a JSON object keyed by variable name, or `@file.json`.
    #[arg(long)]
    record: Option<String>,
    /// Constraint document (JSON).
    #[arg(long)]
    constraints: Option<PathBuf>,
    /// Let non-actionable variables change as well.
    #[arg(long)]
    allow_non_actionable: bool,
    /// Push away from the positive class instead.
    #[arg(long)]
    preventive: bool,
    /// Steps of a preventive trajectory.
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Needed for `--columns actionable` and to check the knowledge base.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// `actionable`, `all`, or comma-separated `name:cell` headers.
    #[arg(long)]
    columns: Option<ClusterColumns>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long = "out")]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long)]
    clusters: Option<PathBuf>,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    /// Allowed browser origin; any origin when omitted.
    #[arg(long)]
    cors_origin: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
}

impl TrainArgs {
    fn overrides(&self) -> RunConfig {
        RunConfig {
            data: self.data.clone(),
            schema: self.schema.clone(),
            output_dir: self.output_dir.clone(),
            train_fraction: self.train_fraction,
            seed: self.seed,
            stratify: self.stratify.then_some(true),
            smoothing: self.smoothing,
            max_bins: self.max_bins,
            min_support: self.min_support,
            merge_tolerance: self.merge_tolerance,
            selection_fraction: self.selection_fraction,
            weight_mode: self.weight_mode.clone(),
            positive_label: self.positive_label.clone(),
            threshold: self.threshold,
            ..RunConfig::default()
        }
    }
}

impl KbArgs {
    fn overrides(&self) -> RunConfig {
        RunConfig {
            model: self.model.clone(),
            data: self.data.clone(),
            split: self.split.clone(),
            slice: self.slice,
            kb: self.kb.clone(),
            output_dir: self.output_dir.clone(),
            ..RunConfig::default()
        }
    }
}

impl ExplainArgs {
    fn overrides(&self) -> RunConfig {
        RunConfig {
            model: self.model.clone(),
            kb: self.kb.clone(),
            constraints: self.constraints.clone(),
            threshold: self.threshold,
            ..RunConfig::default()
        }
    }
}

impl ClusterArgs {
    fn overrides(&self) -> RunConfig {
        RunConfig {
            kb: self.kb.clone(),
            model: self.model.clone(),
            k_min: self.k_min,
            k_max: self.k_max,
            cluster_seed: self.seed,
            restarts: self.restarts,
            max_iter: self.max_iter,
            cluster_columns: self.columns.clone(),
            threshold: self.threshold,
            output_dir: self.output_dir.clone(),
            ..RunConfig::default()
        }
    }
}

impl ServeArgs {
    fn overrides(&self) -> RunConfig {
        RunConfig {
            model: self.model.clone(),
            kb: self.kb.clone(),
            clusters: self.clusters.clone(),
            host: self.host.clone(),
            port: self.port,
            cors_origin: self.cors_origin.clone(),
            threshold: self.threshold,
            ..RunConfig::default()
        }
    }
}

/// Map an error chain onto the documented exit codes.
fn exit_code(err: &anyhow::Error) -> u8 {
    const INPUT: u8 = 2;
    const CONSISTENCY: u8 = 3;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::SplitMismatch(_) => CONSISTENCY,
                _ => INPUT,
            };
        }
        if let Some(e) = cause.downcast_ref::<DeltaError>() {
            return match e {
                DeltaError::FingerprintMismatch { .. } => CONSISTENCY,
                _ => INPUT,
            };
        }
        if let Some(e) = cause.downcast_ref::<ExplainError>() {
            return match e {
                ExplainError::FingerprintMismatch { .. } | ExplainError::InstanceMismatch(_) => CONSISTENCY,
                _ => INPUT,
            };
        }
        if let Some(e) = cause.downcast_ref::<ServiceError>() {
            return match e {
                ServiceError::FingerprintMismatch { .. } => CONSISTENCY,
                ServiceError::Kb(DeltaError::FingerprintMismatch { .. }) => CONSISTENCY,
                _ => INPUT,
            };
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return match e {
                PipelineError::Delta(DeltaError::FingerprintMismatch { .. }) => CONSISTENCY,
                _ => INPUT,
            };
        }
        if cause.is::<delta_recourse::data::DataError>()
            || cause.is::<delta_recourse::preprocess::PreprocessError>()
            || cause.is::<delta_recourse::nbmodel::NbError>()
            || cause.is::<delta_recourse::cluster::ClusterError>()
        {
            return INPUT;
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return INPUT;
            }
        }
    }
    4
}

/// Cap the global rayon pool when `DELTA_RECOURSE_THREADS` is set.
fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("DELTA_RECOURSE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("DELTA_RECOURSE_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let file = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let overrides = match &cli.command {
        Command::Train(a) => a.overrides(),
        Command::Kb(a) => a.overrides(),
        Command::Explain(a) => a.overrides(),
        Command::Cluster(a) => a.overrides(),
        Command::Serve(a) => a.overrides(),
    };
    let cfg = overrides.or(file);
    cfg.validate()?;
    match cli.command {
        Command::Train(_) => commands::train(&cfg),
        Command::Kb(_) => commands::kb(&cfg),
        Command::Explain(a) => commands::explain(
            &cfg,
            &commands::ExplainOptions {
                row_id: a.row_id,
                record: a.record,
                allow_non_actionable: a.allow_non_actionable,
                preventive: a.preventive,
                steps: a.steps,
                format: a.format,
            },
        ),
        Command::Cluster(_) => commands::cluster(&cfg),
        Command::Serve(_) => commands::serve(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let input = anyhow::Error::new(delta_recourse::data::DataError::MissingColumn("x".into()));
        assert_eq!(exit_code(&input), 2);
        let mismatch = anyhow::Error::new(DeltaError::FingerprintMismatch {
            expected: "a".into(),
            found: "b".into(),
        });
        assert_eq!(exit_code(&mismatch), 3);
        assert_eq!(exit_code(&anyhow::Error::new(CliError::UnknownRowId("r".into()))), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("disk full")), 4);
        let wrapped = anyhow::Error::new(CliError::SplitMismatch("x".into())).context("while building");
        assert_eq!(exit_code(&wrapped), 3);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
