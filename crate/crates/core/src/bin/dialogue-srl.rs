use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dialogue_srl::analytics::Unit;
use dialogue_srl::pipeline::{recompute_alerts, run_stages, RunConfig, Stage, StageOutcome};
use dialogue_srl::report::alerts_csv;
use dialogue_srl::Error;

/// Dialogue pattern mining and SRL statistics for student-AI tutoring logs.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for layout, clustering and search.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Unit of analysis for both correlations and group tests.
    #[arg(long, global = true)]
    unit: Option<Unit>,
    /// Significance level for FDR-adjusted p-values.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate the corpus and questionnaire.
    Ingest,
    /// Obtain one vector per utterance.
    Embed,
    /// Hyperparameter search per stream.
    Search,
    /// Fit layouts and clusters; build the pattern catalog.
    Fit,
    /// Alignment profiles per student and per log.
    Profile,
    /// Descriptives, correlations and group comparisons.
    Stats,
    /// Emit tables, classification and alerts.
    Report,
    /// All stages.
    Run,
    /// Print per-unit alerts (CSV) from an existing run.
    Alerts {
        /// Cohort percentile threshold; defaults to the configured one.
        #[arg(long)]
        percentile: Option<f64>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(unit) = cli.unit {
        config.correlation_unit = unit;
        config.group_unit = unit;
    }
    if let Some(alpha) = cli.alpha {
        config.alpha = alpha;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let config = load_config(cli)?;
    let last = match &cli.command {
        Command::Ingest => Stage::Ingest,
        Command::Embed => Stage::Embed,
        Command::Search => Stage::Search,
        Command::Fit => Stage::Fit,
        Command::Profile => Stage::Profile,
        Command::Stats => Stage::Stats,
        Command::Report | Command::Run => Stage::Report,
        Command::Alerts { percentile } => {
            run_stages(&config, &Stage::Report.through())?;
            let alerts = recompute_alerts(&config, percentile.unwrap_or(config.alert_percentile))?;
            print!("{}", alerts_csv(&alerts)?);
            return Ok(());
        }
    };
    let summary = run_stages(&config, &last.through())?;
    for (stage, outcome) in &summary.stages {
        let word = match outcome {
            StageOutcome::Ran => "done",
            StageOutcome::Skipped => "up to date",
        };
        eprintln!("{stage:<8} {word}");
    }
    eprintln!("artifacts in {}", summary.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
