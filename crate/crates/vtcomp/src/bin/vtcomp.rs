//! Thin CLI over the library's command layer.
//!
//! Exit codes: 0 success, 1 i/o failure, 2 configuration error,
//! 3 numerical divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vtcomp::commands::{
    cmd_cost, cmd_eval, cmd_fixed_matrix, cmd_gen_data, cmd_train, exit_code_for,
};
use vtcomp::config::load_config;

#[derive(Parser)]
#[command(name = "vtcomp", version, about = "Visual-token compression testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Parser)]
struct Common {
    /// Experiment config file (TOML, or JSON with a .json extension).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an episode dataset.
    GenData(Common),
    /// Train the matrix generator on an existing dataset.
    Train(Common),
    /// Evaluate configured reducers over the rate/seed sweep.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Generator checkpoint; defaults to checkpoint_best.bin in the
        /// output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Optimize a per-episode fixed matrix and analyze retained tokens.
    FixedMatrix(Common),
    /// Produce analytic cost reports (and optional toy runtime timing).
    Cost(Common),
}

fn run() -> vtcomp::Result<Vec<PathBuf>> {
    let cli = Cli::parse();
    let (common, checkpoint) = match &cli.command {
        Command::GenData(c)
        | Command::Train(c)
        | Command::FixedMatrix(c)
        | Command::Cost(c) => (c, None),
        Command::Eval { common, checkpoint } => (common, checkpoint.as_deref()),
    };
    let loaded = load_config(&common.config)?;
    let out_dir = common
        .out
        .clone()
        .or_else(|| loaded.config.out_dir.clone())
        .ok_or_else(|| {
            vtcomp::Error::Config("no output directory: set out_dir or pass --out".to_string())
        })?;
    let seed = common.seed.unwrap_or(loaded.config.seed);
    match &cli.command {
        Command::GenData(_) => cmd_gen_data(&loaded, &out_dir, seed),
        Command::Train(_) => cmd_train(&loaded, &out_dir, seed),
        Command::Eval { .. } => cmd_eval(&loaded, &out_dir, seed, checkpoint),
        Command::FixedMatrix(_) => cmd_fixed_matrix(&loaded, &out_dir, seed),
        Command::Cost(_) => cmd_cost(&loaded, &out_dir, seed),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(outputs) => {
            for path in outputs {
                println!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}
