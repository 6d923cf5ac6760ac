use std::path::PathBuf;

use anyhow::{bail, Result};

use lensless_core::scenes::smooth_random;
use lensless_core::sysmat::{forward_terms, generate_system_matrices, stripe_params, Terms};
use lensless_core::{io, Mat};

use crate::config::{load_gray_frame, load_mask, Context, GeometryArgs};
use crate::manifest::Run;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Mask vector (LTM1) from `mask-gen`.
    #[arg(long)]
    mask: PathBuf,
    /// Output directory: `sysmat/`, `scenes/` and `meas/`.
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    geometry: GeometryArgs,
    /// Scene files (ltm, pgm or ppm); random smooth scenes are drawn when absent.
    #[arg(long)]
    scene: Vec<PathBuf>,
    /// Number of random scenes when no `--scene` is given.
    #[arg(long, default_value_t = 5)]
    count: usize,
    /// Additive Gaussian noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    /// Render only the coding term `Pc X Qc^T`.
    #[arg(long)]
    coding_only: bool,
}

pub fn run(ctx: &Context, args: Args) -> Result<()> {
    let mut run = Run::start("simulate", ctx.seed);
    let g = args.geometry.resolve(ctx, (64, 128))?;
    let phi = load_mask(&args.mask)?;
    run.input(&args.mask)?;
    let sm = generate_system_matrices(&phi, &g)?;
    let sysmat_dir = args.out.join("sysmat");
    sm.save(&sysmat_dir, Some(&g), Some(&stripe_params(&g, phi.len())))?;

    let (n, m) = sm.scene_shape();
    let scenes: Vec<Mat> = if args.scene.is_empty() {
        (0..args.count)
            .map(|i| smooth_random(n, m, ctx.derive_seed(&format!("simulate/scene/{i}"))))
            .collect()
    } else {
        let mut out = Vec::new();
        for p in &args.scene {
            let x = load_gray_frame(p)?;
            if x.shape() != (n, m) {
                bail!(
                    "{}: scene is {}x{}, geometry expects {n}x{m}",
                    p.display(),
                    x.rows(),
                    x.cols()
                );
            }
            run.input(p)?;
            out.push(x);
        }
        out
    };
    let sigma = ctx.noise_sigma(args.noise);
    let terms = if args.coding_only {
        Terms::CodingOnly
    } else {
        Terms::Full
    };
    for (i, x) in scenes.iter().enumerate() {
        let y = forward_terms(&sm, x, sigma, ctx.derive_seed(&format!("simulate/noise/{i}")), terms)?;
        io::save_mat(args.out.join(format!("scenes/scene_{i:04}.ltm")), x)?;
        io::save_gray(args.out.join(format!("scenes/scene_{i:04}.pgm")), x)?;
        io::save_mat(args.out.join(format!("meas/meas_{i:04}.ltm")), &y)?;
        let peak = y.max_abs();
        io::save_gray(
            args.out.join(format!("meas/meas_{i:04}.pgm")),
            &if peak > 0.0 { y.scale(1.0 / peak) } else { y.clone() },
        )?;
    }
    run.output(&args.out)?;
    println!(
        "simulated {} scene(s): scene {n}x{m}, measurement {}x{}, noise {sigma}",
        scenes.len(),
        sm.meas_shape().0,
        sm.meas_shape().1
    );
    run.finish(&args.out.join("manifest.json"))
}
