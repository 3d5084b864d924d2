//! `forecaster`: generate data, train, forecast, evaluate, and analyze
//! expert routing from one binary.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use forecaster_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "forecaster",
    version,
    about = "Intermittent-demand forecasting with a switch-routed transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic intermittent-demand dataset
    GenerateData(GenerateArgs),
    /// Train a model, checkpointing the best validation epoch
    Train(TrainArgs),
    /// Decode forecasts from a checkpoint
    Forecast(ForecastArgs),
    /// Score a checkpoint, stored forecasts, or baselines on the holdout
    Evaluate(EvaluateArgs),
    /// Tally expert routing overall and per demand regime
    AnalyzeRouting(AnalyzeArgs),
}

/// Dataset source shared by every command that reads data.
#[derive(Args)]
struct DataArgs {
    /// Synthetic dataset directory written by generate-data
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory holding sales_train_validation.csv, calendar.csv, and
    /// sell_prices.csv
    #[arg(long)]
    m5: Option<PathBuf>,
    /// Keep only the first N series of the sales file
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    series: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// prob or hybrid
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda_aux: Option<f64>,
    /// ste_top1 or soft
    #[arg(long)]
    gate_mode: Option<String>,
    /// swiglu or gelu
    #[arg(long)]
    expert_activation: Option<String>,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// point, quantiles, or samples
    #[arg(long)]
    mode: Option<String>,
    /// Comma-separated quantile levels, e.g. 0.1,0.5,0.9
    #[arg(long)]
    quantiles: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Point forecasts.csv written by the forecast command
    #[arg(long)]
    forecasts: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Extra classical sources: naive, croston (repeatable)
    #[arg(long)]
    baseline: Vec<String>,
    /// Comma-separated subset of wape,mase,rmse,wrmsse
    #[arg(long)]
    metrics: Option<String>,
    #[arg(long)]
    croston_alpha: Option<f64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    spike_z: Option<f64>,
    #[arg(long)]
    low_z: Option<f64>,
}

/// Parallelism cap from FORECASTER_THREADS; absent or empty means 1.
fn threads() -> Result<usize> {
    match std::env::var("FORECASTER_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(Error::Usage(format!("FORECASTER_THREADS: {e}"))),
        Ok(v) if v.trim().is_empty() => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "FORECASTER_THREADS must be a positive integer, got {v:?}"
                ))
            }),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(args) => commands::generate(&args),
        Command::Train(args) => commands::train(&args),
        Command::Forecast(args) => commands::forecast(&args),
        Command::Evaluate(args) => commands::evaluate_cmd(&args),
        Command::AnalyzeRouting(args) => commands::analyze_routing(&args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let ok = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
