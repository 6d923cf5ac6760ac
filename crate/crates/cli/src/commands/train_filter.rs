use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use serde::{Deserialize, Serialize};

use lensless_core::filter::{train_filter, FilterMeta, JointFilter};
use lensless_core::recon::{build_recon_operator, default_tau, select_tau, TAU_FACTOR_GRID};
use lensless_core::scenes::smooth_random;
use lensless_core::sysmat::forward;
use lensless_core::{io, Mat, SystemMatrices};

use crate::config::Context;
use crate::manifest::Run;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// System matrix directory.
    #[arg(long)]
    sysmat: Option<PathBuf>,
    /// Output directory for `phi_f.ltm`, `phi_s.ltm` and `filter.json`.
    #[arg(short, long)]
    out: PathBuf,
    /// Number of random training scenes.
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    /// Full-batch gradient steps; overrides `filter.epochs` in the config.
    #[arg(long)]
    epochs: Option<usize>,
    /// Step size applied after curvature rescaling.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Also pick the regulariser factor that maximises training-scene PSNR
    /// and store it as `tau.json`.
    #[arg(long)]
    select_tau: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TauChoice {
    pub tau_factor: f64,
}

pub fn load_tau_choice(filter_dir: &Path) -> Result<Option<f64>> {
    let path = filter_dir.join("tau.json");
    if !path.exists() {
        return Ok(None);
    }
    let c: TauChoice = io::load_json(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(c.tau_factor))
}

pub fn run(ctx: &Context, args: Args) -> Result<()> {
    let mut run = Run::start("train-filter", ctx.seed);
    let dir = ctx.path_or(args.sysmat, &ctx.cfg.paths.sysmat, "sysmat")?;
    let sm = SystemMatrices::load(&dir)?;
    run.input(&dir)?;
    let mut cfg = ctx.cfg.filter.clone();
    cfg.seed = ctx.seed;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        cfg.learning_rate = lr;
    }
    let (n, m) = sm.scene_shape();
    let scenes: Vec<Mat> = (0..args.scenes)
        .map(|i| smooth_random(n, m, ctx.derive_seed(&format!("train-filter/scene/{i}"))))
        .collect();
    let (params, report) = train_filter(&sm, &scenes, &cfg)?;
    params.save(
        &args.out,
        &FilterMeta {
            config: cfg.clone(),
            initial_loss: report.initial_loss(),
            final_loss: report.final_loss(),
            train_scenes: scenes.len(),
        },
    )?;
    io::save_json(args.out.join("loss.json"), &report.loss_history)?;
    println!(
        "trained filter: loss {:.6e} -> {:.6e} over {} epochs",
        report.initial_loss(),
        report.final_loss(),
        cfg.epochs
    );
    if args.select_tau {
        let filter = JointFilter::new(params)?;
        let mut op = build_recon_operator(&sm.pc, &sm.qc, default_tau(&sm.pc, &sm.qc)?)?;
        let pairs = scenes
            .iter()
            .map(|x| Ok((x.clone(), forward(&sm, x, 0.0, 0)?)))
            .collect::<Result<Vec<_>>>()?;
        let tau_factor = select_tau(&mut op, &filter, &pairs, &TAU_FACTOR_GRID)?;
        io::save_json(args.out.join("tau.json"), &TauChoice { tau_factor })?;
        println!("selected tau factor {tau_factor:e}");
    }
    run.output(&args.out)?;
    run.finish(&args.out.join("manifest.json"))
}
