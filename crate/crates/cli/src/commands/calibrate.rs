use std::path::PathBuf;

use anyhow::Result;
use serde::Serialize;

use lensless_core::calib::{
    calibrate_with, forward_error, simulate_calib_set, CalibSet, MAX_REFINE_ITERATIONS, REFINE_TOLERANCE,
};
use lensless_core::scenes::smooth_random;
use lensless_core::{io, Mat, SystemMatrices};

use crate::config::Context;
use crate::manifest::Run;

#[derive(clap::Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["sysmat", "slits"])))]
pub struct Args {
    /// Ground-truth system matrices; slit images are simulated from them.
    #[arg(long)]
    sysmat: Option<PathBuf>,
    /// Directory of recorded slit images (`calib.json`, `h_*.ltm`, `v_*.ltm`).
    #[arg(long)]
    slits: Option<PathBuf>,
    /// Output directory for the recovered matrices and `report.json`.
    #[arg(short, long)]
    out: PathBuf,
    /// Noise added to simulated slit images.
    #[arg(long)]
    noise: Option<f64>,
    /// Keep the simulated slit images in this directory.
    #[arg(long)]
    save_slits: Option<PathBuf>,
    /// Cap on alternating refinement rounds.
    #[arg(long, default_value_t = MAX_REFINE_ITERATIONS)]
    max_iterations: usize,
    /// Stop once every matrix changes by less than this relative amount.
    #[arg(long, default_value_t = REFINE_TOLERANCE)]
    tolerance: f64,
}

#[derive(Serialize)]
struct Report {
    iterations: usize,
    converged: bool,
    last_change: f64,
    /// Worst relative forward-image error against the reference matrices.
    forward_error: Option<f64>,
}

pub fn run(ctx: &Context, args: Args) -> Result<()> {
    let mut run = Run::start("calibrate", ctx.seed);
    let (cs, reference) = match (&args.sysmat, &args.slits) {
        (Some(dir), _) => {
            let sm = SystemMatrices::load(dir)?;
            run.input(dir)?;
            let sigma = ctx.noise_sigma(args.noise);
            let cs = simulate_calib_set(&sm, sigma, ctx.derive_seed("calibrate/slits"))?;
            if let Some(keep) = &args.save_slits {
                cs.save(keep, sigma, "simulated")?;
            }
            (cs, Some(sm))
        }
        (None, Some(dir)) => {
            let (cs, _) = CalibSet::load(dir)?;
            run.input(dir)?;
            (cs, None)
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    let cal = calibrate_with(&cs, args.max_iterations, args.tolerance)?;
    cal.matrices.save(&args.out, None, None)?;
    let forward_error = match &reference {
        Some(sm) => {
            let (n, m) = sm.scene_shape();
            let scenes: Vec<Mat> = (0..5)
                .map(|i| smooth_random(n, m, ctx.derive_seed(&format!("calibrate/check/{i}"))))
                .collect();
            Some(forward_error(&cal.matrices, sm, &scenes)?)
        }
        None => None,
    };
    let report = Report {
        iterations: cal.iterations,
        converged: cal.converged,
        last_change: cal.last_change,
        forward_error,
    };
    io::save_json(args.out.join("report.json"), &report)?;
    println!("converged: {}", report.converged);
    println!("iterations: {}", report.iterations);
    println!("last relative change: {:.3e}", report.last_change);
    if let Some(e) = forward_error {
        println!("forward error vs reference: {e:.3e}");
    }
    run.output(&args.out)?;
    run.finish(&args.out.join("manifest.json"))
}
