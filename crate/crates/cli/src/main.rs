//! `driftsel` — configuration-driven runner for the continual-adaptation
//! testbed: stream generation, protocol runs, plots, and the analytic FLOPs
//! table.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! error, 1 anything else (I/O).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use driftsel_core::model::ModelConfig;
use driftsel_core::Error;

mod commands;
mod config;
mod plot;

#[derive(Parser)]
#[command(name = "driftsel", version, about = "continual-adaptation testbed runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    config: PathBuf,
    /// Override a config scalar, e.g. `--set protocol.seed=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration without running anything.
    Validate(ConfigArgs),
    /// Generate and persist the synthetic event stream.
    Generate(ConfigArgs),
    /// Run the full protocol and write reports.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Reuse the pretraining checkpoint (and a completed report) from a
        /// previous run of the identical configuration.
        #[arg(long)]
        resume: bool,
        /// Print the planned arm-by-interval matrix and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Render plots and the error-reduction table from a finished run.
    Plot {
        /// Directory containing report.json (a run's output directory).
        report_dir: PathBuf,
    },
    /// Print the analytic selection/training FLOPs table.
    Flops {
        /// Model width.
        #[arg(long, default_value_t = 32)]
        dim: usize,
        /// Model depth.
        #[arg(long, default_value_t = 2)]
        depth: usize,
        /// Events per chunk used for the forward-pass cost.
        #[arg(long, default_value_t = 100)]
        events: usize,
        /// Candidate pool size.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Reference set size.
        #[arg(long, default_value_t = 100)]
        r: usize,
        /// Selection budget (samples trained on).
        #[arg(long, default_value_t = 200)]
        k: usize,
        /// Update epochs.
        #[arg(long, default_value_t = 10)]
        epochs: usize,
    },
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Validate(args) => {
            let (cfg, effective) = config::load_config(&args.config, &args.sets)?;
            commands::cmd_validate(&cfg, &config::config_hash(&effective))
        }
        Command::Generate(args) => {
            let (cfg, effective) = config::load_config(&args.config, &args.sets)?;
            commands::cmd_generate(&cfg, &config::config_hash(&effective), &config_dir(&args.config))
        }
        Command::Run { config: args, resume, dry_run } => {
            let (cfg, effective) = config::load_config(&args.config, &args.sets)?;
            commands::cmd_run(
                &cfg,
                &config::config_hash(&effective),
                &config_dir(&args.config),
                &effective,
                resume,
                dry_run,
            )
        }
        Command::Plot { report_dir } => commands::cmd_plot(&report_dir),
        Command::Flops { dim, depth, events, n, r, k, epochs } => {
            let model = ModelConfig { dim, depth, ..Default::default() };
            commands::cmd_flops(&model, events, n, r, k, epochs)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Data(_) => 3,
                Error::Numerical(_) => 4,
                Error::Io(_) => 1,
            })
        }
    }
}
