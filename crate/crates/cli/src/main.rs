//! `lfdepth`: command-line front end for the light-field depth toolkit.
//!
//! Every subcommand reads an optional TOML configuration, writes its
//! products into the output directory together with `config.toml` (the
//! effective configuration) and `manifest.toml` (hashes of config, inputs
//! and outputs).
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error,
//! 4 processing error.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use run::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "lfdepth",
    version,
    about = "Depth reconstruction for focused light-field cameras"
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, short = 'c', global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides paths.output_dir).
    #[arg(long, short = 'o', global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; all available cores by default. Results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Raw light-field PNG (overrides paths.lightfield).
    #[arg(long, global = true)]
    pub lightfield: Option<PathBuf>,
    /// HR PNG (overrides paths.hr).
    #[arg(long, global = true)]
    pub hr: Option<PathBuf>,
    /// Disparity CSV (overrides paths.disparity).
    #[arg(long, global = true)]
    pub disparity: Option<PathBuf>,
    /// Calibration CSV with columns a_mm,w_mm (overrides paths.calibration).
    #[arg(long, global = true)]
    pub calibration: Option<PathBuf>,
    /// Dense depth PFM on the view lattice (overrides paths.depth).
    #[arg(long, global = true)]
    pub depth: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(long, short = 'v', global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Render a light-field / HR pair of the configured scene.
    Simulate,
    /// Write the virtual-depth to object-depth calibration table.
    Calibrate {
        /// Measure the table from this many simulated planes instead of the thin-lens model.
        #[arg(long)]
        planes: Option<usize>,
    },
    /// Super-resolve the light field with a dictionary built from the HR frame.
    Superres,
    /// Sparse disparities between adjacent elemental images.
    Disparity,
    /// Calibrated sparse depth and the dense map from a disparity CSV.
    Depth,
    /// Total-focus view of the light field at the registration depth.
    Reconstruct,
    /// Register the view to the HR frame and fuse a dense depth map into RGB-D.
    Fuse,
    /// Evaluation protocols on simulated data.
    Evaluate {
        #[arg(long, value_enum, default_value_t = Protocol::Sweep)]
        protocol: Protocol,
    },
    /// Full chain: optional super-resolution, disparity, depth, fusion.
    Pipeline,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Point-source scan: per-depth mean and spread of the recovered depth.
    #[value(alias = "fig4")]
    Sweep,
    /// Simulate the configured scene, run the full chain and score it.
    Scene,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.common.verbose);
    match run::execute(&cli.common, &cli.command) {
        Ok(dir) => {
            log::info!("outputs written to {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("lfdepth: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}
