//! `uaf`: run, sweep, and report on model-fusion experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use uaf_core::harness::{self, load_experiment_config, HarnessError, ReportKind, RunOutput};
use uaf_core::uncertainty::EstimatorRegistry;

#[derive(Parser)]
#[command(
    name = "uaf",
    version,
    about = "Profile a pool of language-model backends, select the top K by accuracy x self-assessment, and fuse their answers per example"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write report + tables + traces.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-fuse one run's responses for each K in a range and emit k_sweep.csv.
    SweepK {
        #[arg(long)]
        config: PathBuf,
        /// Range like `1..6` (inclusive) or a comma list like `1,2,4`.
        /// Defaults to the config's k_sweep.
        #[arg(long)]
        k: Option<String>,
    },
    /// Regenerate a derived table (rq1 | rq2 | fig1) from persisted traces.
    Report {
        /// rq1 = per-model AUROC, rq2 = complementarity matrix,
        /// fig1 = confident-correct distribution.
        kind: String,
        #[arg(long)]
        run: PathBuf,
    },
    /// Check a config file without querying any backend.
    ValidateConfig { config: PathBuf },
}

fn parse_k_range(raw: &str) -> Result<Vec<usize>, String> {
    let raw = raw.trim();
    if let Some((lo, hi)) = raw.split_once("..") {
        let lo: usize = lo
            .trim()
            .parse()
            .map_err(|_| format!("bad k range {raw:?}"))?;
        let hi: usize = hi
            .trim()
            .trim_start_matches('=')
            .trim()
            .parse()
            .map_err(|_| format!("bad k range {raw:?}"))?;
        if lo == 0 || hi < lo {
            return Err(format!("bad k range {raw:?}"));
        }
        return Ok((lo..=hi).collect());
    }
    raw.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad k value {part:?}"))
        })
        .collect()
}

fn print_error(error: &anyhow::Error) {
    let (kind, message) = match error.downcast_ref::<HarnessError>() {
        Some(harness_error) => (harness_error.kind(), harness_error.to_string()),
        None => ("cli", error.to_string()),
    };
    let payload = json!({"error": {"kind": kind, "message": message}});
    eprintln!("{payload}");
}

fn run(command: Command) -> anyhow::Result<()> {
    let registry = EstimatorRegistry::new();
    match command {
        Command::Run { config } => {
            let config = load_experiment_config(&config)?;
            let RunOutput {
                report, telemetry, ..
            } = harness::cmd_run(&config, &registry)?;
            println!(
                "run complete: k={} criterion={} ensemble_accuracy={:.4}",
                report.config.k, report.config.criterion, report.ensemble_accuracy
            );
            for row in &report.profiles {
                println!(
                    "  {}: accuracy={:.4} sah={:.4} cscore={:.4}{}",
                    row.backend_id,
                    row.accuracy,
                    row.sah,
                    row.cscore,
                    if row.selected { " [selected]" } else { "" }
                );
            }
            println!(
                "backend calls: {} live, {} cached ({:.2}s); artifacts in {}",
                telemetry.total_live_calls,
                telemetry.total_cache_hits,
                telemetry.wall_clock_secs,
                config.output_dir.display()
            );
            Ok(())
        }
        Command::SweepK { config, k } => {
            let config = load_experiment_config(&config)?;
            let ks = k
                .as_deref()
                .map(parse_k_range)
                .transpose()
                .map_err(anyhow::Error::msg)?;
            let (points, telemetry) = harness::cmd_sweep_k(&config, ks.as_deref(), &registry)?;
            for point in &points {
                println!(
                    "k={} ensemble_accuracy={:.4}",
                    point.k, point.ensemble_accuracy
                );
            }
            println!(
                "backend calls: {} live, {} cached; wrote {}",
                telemetry.total_live_calls,
                telemetry.total_cache_hits,
                config.output_dir.join("k_sweep.csv").display()
            );
            Ok(())
        }
        Command::Report { kind, run } => {
            let kind: ReportKind = kind.parse().map_err(anyhow::Error::msg)?;
            let path = harness::cmd_report(kind, &run)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::ValidateConfig { config } => {
            let summary = harness::cmd_validate(&config)?;
            println!(
                "config ok: {} examples, {} backends",
                summary.n_examples, summary.n_backends
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            print_error(&error);
            ExitCode::FAILURE
        }
    }
}
