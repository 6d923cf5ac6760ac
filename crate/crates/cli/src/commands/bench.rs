use std::path::PathBuf;

use anyhow::Result;
use rayon::prelude::*;
use serde::Serialize;

use lensless_core::filter::{JointFilter, JointFilterParams};
use lensless_core::mask::random_vector;
use lensless_core::recon::{
    build_recon_operator, default_tau, reconstruct_rgb, solve_nesterov, time_frames, NesterovConfig, TimingReport,
};
use lensless_core::scenes::smooth_random;
use lensless_core::sysmat::{forward, generate_system_matrices};
use lensless_core::{io, Mat};

use crate::config::{default_mask_len, Context, GeometryArgs};
use crate::manifest::Run;

/// Distinct synthetic measurements cycled through the timed frames.
const POOL: usize = 4;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Optional JSON report path; the table is always printed.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Geometry; the full-size sensor unless sizes are given here or in the config.
    #[command(flatten)]
    geometry: GeometryArgs,
    /// Closed-form frames to average over.
    #[arg(long, default_value_t = 100)]
    frames: usize,
    /// Upper bound on iterative frames, which take orders of magnitude longer.
    #[arg(long, default_value_t = 1)]
    nesterov_frames: usize,
    /// Nesterov iterations per frame.
    #[arg(long, default_value_t = 800)]
    iterations: usize,
    /// Mask length; defaults to the sensor side plus a 20% margin.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Serialize)]
struct Report {
    scene: (usize, usize),
    measurement: (usize, usize),
    channels: usize,
    mask_len: usize,
    nesterov_iterations: usize,
    tau: f64,
    closed: TimingReport,
    nesterov: TimingReport,
    /// Mean iterative time over mean closed-form time.
    ratio: f64,
}

pub fn run(ctx: &Context, args: Args) -> Result<()> {
    let run = Run::start("bench", ctx.seed);
    let mut geometry = args.geometry.clone();
    if args.geometry.scene_size.is_none() && args.geometry.meas_size.is_none() && ctx.cfg.geometry.is_none() {
        geometry.table_one = true;
    }
    let g = geometry.resolve(ctx, (64, 128))?;
    let k = args.k.unwrap_or_else(|| default_mask_len(&g));
    let phi = random_vector(k, ctx.derive_seed("bench/mask"))?;
    let sm = generate_system_matrices(&phi, &g)?;
    let (n, m) = sm.scene_shape();
    let (r, s) = sm.meas_shape();
    let measurements: Vec<[Mat; 3]> = (0..POOL)
        .map(|i| {
            let ch = |c: usize| {
                let x = smooth_random(n, m, ctx.derive_seed(&format!("bench/scene/{i}/{c}")));
                forward(&sm, &x, 0.0, 0)
            };
            Ok([ch(0)?, ch(1)?, ch(2)?])
        })
        .collect::<Result<_>>()?;

    let tau = default_tau(&sm.pc, &sm.qc)?;
    let op = build_recon_operator(&sm.pc, &sm.qc, tau)?;
    let f = JointFilter::new(JointFilterParams::low_pass(r, s))?;
    let filters = [f.clone(), f.clone(), f];
    eprintln!(
        "timing {} closed-form frame(s) at {n}x{m} -> {r}x{s}, 3 channels",
        args.frames
    );
    let closed = time_frames("closed", args.frames, |i| {
        reconstruct_rgb(&op, &filters, &measurements[i % POOL]).map(|_| ())
    })?;
    let cfg = NesterovConfig::auto(&sm, args.iterations, tau)?;
    let nesterov_frames = args.nesterov_frames.clamp(1, args.frames.max(1));
    eprintln!(
        "timing {nesterov_frames} Nesterov frame(s) of {} iterations",
        args.iterations
    );
    let nesterov = time_frames("nesterov", nesterov_frames, |i| {
        measurements[i % POOL]
            .par_iter()
            .map(|y| solve_nesterov(&sm, y, &cfg).map(|_| ()))
            .collect()
    })?;
    let report = Report {
        scene: (n, m),
        measurement: (r, s),
        channels: 3,
        mask_len: k,
        nesterov_iterations: args.iterations,
        tau,
        ratio: nesterov.mean_ms / closed.mean_ms,
        closed,
        nesterov,
    };
    println!(
        "{:<10} {:>8} {:>14} {:>14}",
        "method", "frames", "mean [ms]", "p95 [ms]"
    );
    for t in [&report.closed, &report.nesterov] {
        println!(
            "{:<10} {:>8} {:>14.3} {:>14.3}",
            t.method, t.frames, t.mean_ms, t.p95_ms
        );
    }
    println!("ratio: {:.1}", report.ratio);
    if let Some(out) = &args.out {
        io::save_json(out, &report)?;
        let mut run = run;
        run.output(out)?;
        run.finish(&out.with_extension("manifest.json"))?;
    }
    Ok(())
}
