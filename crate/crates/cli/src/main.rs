//! `lensless`: mask generation, simulation, calibration, reconstruction,
//! mask optimisation, benchmarking and tactile interpretation.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{bench, calibrate, mask_gen, optimize, reconstruct, simulate, tactile, train_filter};

#[derive(Parser, Debug)]
#[command(
    name = "lensless",
    version,
    about = "Separable-mask lensless tactile imaging pipeline"
)]
pub struct Cli {
    /// JSON pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; every random stream is derived from (seed, tag).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a mask vector (LTM1) and its assembled pattern (PGM).
    MaskGen(mask_gen::Args),
    /// Build system matrices for a mask and render measurements.
    Simulate(simulate::Args),
    /// Train the joint spatial-frequency filter on simulated scenes.
    TrainFilter(train_filter::Args),
    /// Recover system matrices from slit-scan measurements.
    Calibrate(calibrate::Args),
    /// Reconstruct scenes from measurements.
    Reconstruct(reconstruct::Args),
    /// Search for a mask vector with the genetic algorithm.
    OptimizeMask(optimize::Args),
    /// Time the closed-form pipeline against the iterative baseline.
    Bench(bench::Args),
    /// Tactile LUT calibration, rendering, depth recovery and marker tracking.
    Tactile(tactile::Args),
}

/// Numeric and convergence failures exit 1; usage and I/O problems exit 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    use lensless_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Numeric(_) | E::TrainingDiverged { .. } | E::SolverDiverged { .. } | E::Calibration(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match config::PipelineConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let ctx = config::Context { cfg, seed };
    let result = match cli.command {
        Command::MaskGen(a) => mask_gen::run(&ctx, a),
        Command::Simulate(a) => simulate::run(&ctx, a),
        Command::TrainFilter(a) => train_filter::run(&ctx, a),
        Command::Calibrate(a) => calibrate::run(&ctx, a),
        Command::Reconstruct(a) => reconstruct::run(&ctx, a),
        Command::OptimizeMask(a) => optimize::run(&ctx, a),
        Command::Bench(a) => bench::run(&ctx, a),
        Command::Tactile(a) => tactile::run(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
