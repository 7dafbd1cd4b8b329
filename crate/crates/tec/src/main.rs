use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tec_core::harness::PredictionMethod;
use tec_sim::config::{Overrides, RunConfig};
use tec_sim::error::{exit, SimError};
use tec_sim::pipeline;

/// Transactive energy community simulator.
#[derive(Debug, Parser)]
#[command(name = "tec", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, env = "TEC_CONFIG")]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Prediction method(s): rnd, flf, lmf. Repeat or comma-separate.
    #[arg(long, global = true, value_delimiter = ',')]
    method: Vec<PredictionMethod>,
    /// Restrict to these communities.
    #[arg(long, global = true, value_delimiter = ',')]
    community: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Write synthetic per-building demand and generation series.
    Generate,
    /// Train forecasting models (`--method flf` or `--method lmf`).
    Train,
    /// Solve one interval analytically and with the distributed solver.
    Solve {
        /// Community net demand in kW.
        #[arg(long, allow_negative_numbers = true)]
        demand: f64,
        /// Write per-round agent states to this CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the test days for every community, month and method.
    Simulate,
    /// Rebuild the summary grid from a previous simulate run.
    Report,
    /// Print the effective configuration.
    ShowConfig,
}

fn run(cli: Cli) -> Result<(), SimError> {
    let train_method = match cli.method.as_slice() {
        [] => None,
        [m] => Some(*m),
        _ => None,
    };
    let overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out.clone(),
        methods: (!cli.method.is_empty()).then(|| cli.method.clone()),
        communities: (!cli.community.is_empty()).then(|| cli.community.clone()),
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    log::debug!("config hash {}", cfg.hash());

    match cli.cmd {
        Cmd::Generate => {
            let files = pipeline::cmd_generate(&cfg)?;
            println!("wrote {} files under {}", files.len(), cfg.paths.data_dir.display());
        }
        Cmd::Train => {
            let method = match train_method {
                Some(m @ (PredictionMethod::Flf | PredictionMethod::Lmf)) => m,
                _ => return Err(SimError::Config("train needs exactly one of --method flf or --method lmf".into())),
            };
            let files = pipeline::cmd_train(&cfg, method)?;
            println!("wrote {} files under {}", files.len(), cfg.paths.model_dir.display());
        }
        Cmd::Solve { demand, trace } => {
            let community = match cli.community.as_slice() {
                [] => cfg
                    .communities
                    .first()
                    .map(|c| c.name.clone())
                    .ok_or_else(|| SimError::Config("no communities configured".into()))?,
                [c] => c.clone(),
                _ => return Err(SimError::Config("solve takes a single --community".into())),
            };
            print!("{}", pipeline::cmd_solve(&cfg, &community, demand, trace.as_deref())?);
        }
        Cmd::Simulate => {
            pipeline::cmd_simulate(&cfg)?;
            print!("{}", pipeline::cmd_report(&cfg)?);
        }
        Cmd::Report => print!("{}", pipeline::cmd_report(&cfg)?),
        Cmd::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TEC_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
