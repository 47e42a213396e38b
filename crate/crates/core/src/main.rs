use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedpia::cli::{cmd_gen_data, cmd_run, cmd_sweep, cmd_verify, format_sweep};
use fedpia::verify::VerifyOptions;

#[derive(Parser)]
#[command(name = "fedpia", version, about = "Federated adapter fusion simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured method and seed, writing metrics and a manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replaces the seed list from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the built-in oracle checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// One run per value of a single parameter, plus a comparison table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset described by a TOML spec as CSV.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seed } => cmd_run(&config, &out, seed).map(|m| {
            println!("wrote {} and {} checkpoints to {}", m.metrics_file, m.checkpoints.len(), out.display());
            true
        }),
        Command::Verify { seed } => cmd_verify(&mut std::io::stdout(), &VerifyOptions { seed, ..Default::default() }),
        Command::Sweep { config, param, values, out } => cmd_sweep(&config, &param, &values, &out).map(|rows| {
            print!("{}", format_sweep(&rows));
            true
        }),
        Command::GenData { spec, out } => cmd_gen_data(&spec, &out).map(|n| {
            println!("wrote {n} rows to {}", out.display());
            true
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
