use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use treekernel::error::Error;
use treekernel::pipeline;

#[derive(Parser)]
#[command(name = "treekernel", about = "Random-partition forest kernels: Gram matrices, embeddings, importance, boosting traces")]
struct Cli {
    /// Flat key = value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; all randomness derives from it
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory root
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Rayon thread count (0 = default)
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a forest kernel Gram matrix as CSV
    Gram,
    /// Kernel PCA embedding comparison (linear, rbf, k0, kP)
    Kpca,
    /// Variable importance benchmark table across synthetic scenarios
    GviBench,
    /// Per-step trace of the infinitesimal boosting flow
    IgbTrace,
    /// Effective sample size report
    Neff,
}

fn run(cli: &Cli) -> treekernel::error::Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    let cfg: BTreeMap<String, String> = match &cli.config {
        Some(path) => pipeline::load_config(path)?,
        None => BTreeMap::new(),
    };
    match cli.command {
        Command::Gram => pipeline::run_gram(&cfg, cli.seed, &cli.out),
        Command::Kpca => pipeline::run_kpca_experiment(&cfg, cli.seed, &cli.out),
        Command::GviBench => pipeline::run_gvi_benchmark(&cfg, cli.seed, &cli.out),
        Command::IgbTrace => pipeline::run_igb_trace(&cfg, cli.seed, &cli.out),
        Command::Neff => pipeline::run_neff(&cfg, cli.seed, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_)
                | Error::MalformedCsv { .. }
                | Error::DimensionMismatch { .. }
                | Error::OutOfUnitCube { .. }
                | Error::EmptyDataset => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
