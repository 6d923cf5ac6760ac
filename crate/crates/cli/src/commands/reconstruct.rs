use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::ValueEnum;
use rayon::prelude::*;

use lensless_core::filter::{JointFilter, JointFilterParams};
use lensless_core::recon::{
    build_recon_operator, default_tau, reconstruct_frame, reconstruct_rgb, solve_nesterov, time_frames, NesterovConfig,
    ReconOperator, DEFAULT_TAU_FACTOR,
};
use lensless_core::{io, ImageRGB, Mat, Result as CoreResult, SystemMatrices};

use crate::commands::train_filter::load_tau_choice;
use crate::config::{list_frames, load_frame, Context, Frame};
use crate::manifest::Run;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    /// Joint filter followed by the SVD closed-form solve.
    Closed,
    /// Accelerated gradient descent on the full two-term model.
    Nesterov,
}

#[derive(clap::Args, Debug)]
pub struct Args {
    /// System matrix directory.
    #[arg(long)]
    sysmat: Option<PathBuf>,
    /// Trained filter directory; required for the closed-form method.
    #[arg(long)]
    filter: Option<PathBuf>,
    /// A measurement file (ltm, pgm, ppm) or a directory of them.
    #[arg(short, long)]
    input: PathBuf,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Closed)]
    method: Method,
    /// Nesterov iterations.
    #[arg(long, default_value_t = 800)]
    iterations: usize,
    /// Regulariser as a multiple of `max(sp) * max(sq)`.
    #[arg(long, conflicts_with = "tau")]
    tau_factor: Option<f64>,
    /// Absolute regulariser.
    #[arg(long)]
    tau: Option<f64>,
}

#[allow(clippy::large_enum_variant)]
enum Solver {
    Closed(ReconOperator, JointFilter),
    Nesterov(SystemMatrices, NesterovConfig),
}

impl Solver {
    fn gray(&self, y: &Mat) -> CoreResult<Mat> {
        match self {
            Solver::Closed(op, f) => reconstruct_frame(op, f, y),
            Solver::Nesterov(sm, cfg) => solve_nesterov(sm, y, cfg),
        }
    }

    fn rgb(&self, img: &ImageRGB) -> CoreResult<[Mat; 3]> {
        let y = [img.channel(0).clone(), img.channel(1).clone(), img.channel(2).clone()];
        match self {
            Solver::Closed(op, f) => reconstruct_rgb(op, &[f.clone(), f.clone(), f.clone()], &y),
            Solver::Nesterov(sm, cfg) => {
                let v = y
                    .par_iter()
                    .map(|c| solve_nesterov(sm, c, cfg))
                    .collect::<CoreResult<Vec<Mat>>>()?;
                let [r, g, b]: [Mat; 3] = v.try_into().expect("three channels");
                Ok([r, g, b])
            }
        }
    }
}

fn write_gray(out: &Path, stem: &str, x: &Mat) -> CoreResult<()> {
    io::save_mat(out.join(format!("{stem}.ltm")), x)?;
    io::save_gray(out.join(format!("{stem}.pgm")), x)?;
    Ok(())
}

pub fn run(ctx: &Context, args: Args) -> Result<()> {
    let mut run = Run::start("reconstruct", ctx.seed);
    let sysmat_dir = ctx.path_or(args.sysmat, &ctx.cfg.paths.sysmat, "sysmat")?;
    let sm = SystemMatrices::load(&sysmat_dir)?;
    run.input(&sysmat_dir)?;
    let filter_dir = args.filter.or_else(|| ctx.cfg.paths.filter.clone());
    let base = default_tau(&sm.pc, &sm.qc)?;
    let stored = match &filter_dir {
        Some(d) => load_tau_choice(d)?,
        None => None,
    };
    let factor = args
        .tau_factor
        .or(ctx.cfg.tau_factor)
        .or(stored)
        .unwrap_or(DEFAULT_TAU_FACTOR);
    let tau = args.tau.unwrap_or(base / DEFAULT_TAU_FACTOR * factor);

    let solver = match args.method {
        Method::Closed => {
            let Some(dir) = filter_dir else {
                bail!("the closed-form method needs --filter (or paths.filter in the config)");
            };
            let params = JointFilterParams::load(&dir)?;
            run.input(&dir)?;
            Solver::Closed(build_recon_operator(&sm.pc, &sm.qc, tau)?, JointFilter::new(params)?)
        }
        Method::Nesterov => {
            let cfg = NesterovConfig::auto(&sm, args.iterations, tau)?;
            Solver::Nesterov(sm, cfg)
        }
    };

    let inputs = if args.input.is_dir() {
        list_frames(&args.input)?
    } else {
        vec![args.input.clone()]
    };
    let frames = inputs.iter().map(|p| load_frame(p)).collect::<Result<Vec<Frame>>>()?;
    for p in &inputs {
        run.input(p)?;
    }
    std::fs::create_dir_all(&args.out)?;
    let method = format!("{:?}", args.method).to_lowercase();
    let timing = time_frames(&method, frames.len(), |i| {
        let stem = inputs[i].file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
        match &frames[i] {
            Frame::Gray(y) => write_gray(&args.out, stem, &solver.gray(y)?),
            Frame::Rgb(img) => {
                let [r, g, b] = solver.rgb(img)?;
                for (c, x) in ["r", "g", "b"].iter().zip([&r, &g, &b]) {
                    io::save_mat(args.out.join(format!("{stem}_{c}.ltm")), x)?;
                }
                io::save_image(args.out.join(format!("{stem}.ppm")), &ImageRGB::clamped(r, g, b)?)
            }
        }
    })?;
    io::save_json(args.out.join("timing.json"), &timing)?;
    println!(
        "{} frame(s) with {method}: mean {:.3} ms, p95 {:.3} ms per frame (tau {tau:.3e})",
        timing.frames, timing.mean_ms, timing.p95_ms
    );
    run.output(&args.out)?;
    run.finish(&args.out.join("manifest.json"))
}
