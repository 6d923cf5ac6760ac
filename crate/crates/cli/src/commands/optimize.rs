use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Result;
use serde::Serialize;

use lensless_core::io;
use lensless_core::maskopt::{evolve_with, fitness_breakdown, FitnessBreakdown, FitnessSpec, FitnessWeights};

use crate::config::{default_mask_len, save_mask, Context, GeometryArgs};
use crate::manifest::Run;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Output directory: `best.ltm`, `best.pgm`, `history.csv`, `result.json`.
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    geometry: GeometryArgs,
    /// Gene length; defaults to the sensor side plus a 20% margin.
    #[arg(long)]
    k: Option<usize>,
    /// Genes per generation; overrides `ga.population` in the config.
    #[arg(long)]
    population: Option<usize>,
    /// Generations after the initial population; overrides `ga.generations`.
    #[arg(long)]
    generations: Option<usize>,
    /// Measurement noise used when scoring each gene.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    weight_ssim: f64,
    #[arg(long, default_value_t = 1.0)]
    weight_psnr: f64,
    #[arg(long, default_value_t = 1.0)]
    weight_grad: f64,
}

#[derive(Serialize)]
struct Summary {
    gene_len: usize,
    best_fitness: f64,
    breakdown: FitnessBreakdown,
    generation0_best: f64,
}

pub fn run(ctx: &Context, args: Args) -> Result<()> {
    let mut run = Run::start("optimize-mask", ctx.seed);
    let g = args.geometry.resolve(ctx, (32, 64))?;
    let k = args.k.unwrap_or_else(|| default_mask_len(&g));
    let mut cfg = ctx.cfg.ga.clone();
    cfg.seed = ctx.seed;
    if let Some(p) = args.population {
        cfg.population = p;
    }
    if let Some(n) = args.generations {
        cfg.generations = n;
    }
    let mut spec = FitnessSpec::standard(&g, k)?;
    spec.weights = FitnessWeights {
        ssim: args.weight_ssim,
        psnr: args.weight_psnr,
        grad: args.weight_grad,
    };
    if let Some(sigma) = args.noise.or(ctx.cfg.noise_sigma) {
        spec.noise_sigma = sigma;
    }
    spec.noise_seed = ctx.derive_seed("optimize-mask/noise");

    let mut csv = String::from("generation,best,mean\n");
    let result = evolve_with(&cfg, &spec, &g, k, |s| {
        writeln!(csv, "{},{:.9},{:.9}", s.generation, s.best, s.mean).expect("writing to a String");
        log::info!("generation {}: best {:.4} mean {:.4}", s.generation, s.best, s.mean);
    })?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("history.csv"), csv)?;
    save_mask(&args.out.join("best.ltm"), &result.best, g.delta_mask)?;
    let summary = Summary {
        gene_len: k,
        best_fitness: result.best_fitness,
        breakdown: fitness_breakdown(&result.best, &spec, &g)?,
        generation0_best: result.history[0].best,
    };
    io::save_json(args.out.join("result.json"), &summary)?;
    println!(
        "best fitness {:.4} (generation 0: {:.4}) after {} generations, K = {k}",
        summary.best_fitness, summary.generation0_best, cfg.generations
    );
    run.output(&args.out)?;
    run.finish(&args.out.join("manifest.json"))
}
