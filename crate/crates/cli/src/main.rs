mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lateral_mpc::scenario::ControllerMode;

/// Exit code 2: bad configuration or missing input. Exit code 1: the run
/// itself failed.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<lateral_mpc::Error> for CliError {
    fn from(e: lateral_mpc::Error) -> Self {
        match e {
            lateral_mpc::Error::InvalidParameter { .. } => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "lateral-mpc", version, about = "Velocity-adaptive lateral MPC: simulation, tuning and adapter training")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory (the environment variable
    /// LATERAL_MPC_OUTPUT_DIR takes precedence over the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write its log and summary.
    Simulate {
        #[arg(long, default_value = "triple-lane-change")]
        scenario: String,
        #[arg(long, default_value = "fixed")]
        mode: ControllerMode,
        /// Adapter model file (defaults to the trained model in the output directory).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Tune the knobs for a single operating condition.
    Tune {
        #[arg(long)]
        vx: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        wind: f64,
        #[arg(long, default_value_t = 0.9)]
        mu: f64,
        #[arg(long, default_value_t = 3.5, allow_negative_numbers = true)]
        y_ref: f64,
    },
    /// Tune every grid point and write the dataset CSV.
    Dataset {
        /// Samples per axis as vx,wind,mu,y_ref (overrides the config grid counts).
        #[arg(long, value_parser = parse_counts)]
        counts: Option<[usize; 4]>,
    },
    /// Train the four MLP regressors.
    TrainNn {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train the four ANFIS regressors.
    TrainAnfis {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Spot-check a trained adapter against dataset records.
    Evaluate {
        #[arg(long, value_parser = ["nn", "anfis"])]
        adapter: String,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        points: usize,
    },
    /// Run fixed, MLP-adaptive and ANFIS-adaptive control on one scenario.
    Compare {
        #[arg(long, default_value = "triple-lane-change")]
        scenario: String,
        #[arg(long)]
        nn_model: Option<PathBuf>,
        #[arg(long)]
        anfis_model: Option<PathBuf>,
    },
}

fn parse_counts(s: &str) -> Result<[usize; 4], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected four comma-separated counts".to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = commands::Context::new(&cli.common)?;
    match cli.command {
        Command::Simulate { scenario, mode, model } => commands::simulate(&ctx, &scenario, mode, model),
        Command::Tune { vx, wind, mu, y_ref } => commands::tune(&ctx, vx, wind, mu, y_ref),
        Command::Dataset { counts } => commands::dataset(&ctx, counts),
        Command::TrainNn { dataset } => commands::train_nn(&ctx, dataset),
        Command::TrainAnfis { dataset } => commands::train_anfis(&ctx, dataset),
        Command::Evaluate {
            adapter,
            model,
            dataset,
            points,
        } => commands::evaluate(&ctx, &adapter, model, dataset, points),
        Command::Compare {
            scenario,
            nn_model,
            anfis_model,
        } => commands::compare(&ctx, &scenario, nn_model, anfis_model),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
