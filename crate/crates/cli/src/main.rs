//! `petsynth`: phantom generation, training, sampling, evaluation and oracle checks.

mod commands;
mod config;
mod error;
mod images;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{eval, gen_phantom, oracle, sample, train};

#[derive(Debug, Parser)]
#[command(name = "petsynth", version, about = "MRI-conditioned PET synthesis with a joint-score diffusion model")]
struct Cli {
    /// Log filter (e.g. `info`, `debug`); defaults to the config's io.log_level.
    #[arg(long, global = true)]
    log_level: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic paired MRI/PET dataset.
    GenPhantom(gen_phantom::Args),
    /// Train the score network with denoising score matching.
    Train(train::Args),
    /// Synthesize PET slices from MRI with the predictor-corrector sampler.
    Sample(sample::Args),
    /// Compare synthesized and reference PET with PSNR and SSIM.
    Eval(eval::Args),
    /// Run the analytic Gaussian self-checks.
    OracleCheck(oracle::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let log_level = cli.log_level.as_deref();
    let result = match cli.command {
        Command::GenPhantom(a) => gen_phantom::run(a, log_level),
        Command::Train(a) => train::run(a, log_level),
        Command::Sample(a) => sample::run(a, log_level),
        Command::Eval(a) => eval::run(a, log_level),
        Command::OracleCheck(a) => oracle::run(a, log_level),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
