use std::path::PathBuf;

use anyhow::Result;
use clap::Subcommand;

use lensless_core::mask::{mls_vector, random_vector};

use crate::config::{save_mask, Context};
use crate::manifest::{manifest_path, Run};

#[derive(clap::Args, Debug)]
pub struct Args {
    #[command(subcommand)]
    kind: Kind,
}

#[derive(clap::Args, Debug)]
struct Output {
    /// Output LTM1 file; the assembled pattern goes next to it as PGM.
    #[arg(short, long)]
    out: PathBuf,
    /// Mask feature size in micrometres, recorded with the pattern.
    #[arg(long, default_value_t = 20.0)]
    feature_size: f64,
}

#[derive(Subcommand, Debug)]
enum Kind {
    /// Maximum-length sequence of the given LFSR order, tiled `repeats` times.
    Mls {
        #[arg(long)]
        order: u32,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[command(flatten)]
        output: Output,
    },
    /// Uniform random +-1 vector drawn from the root seed.
    Random {
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        output: Output,
    },
}

pub fn run(ctx: &Context, args: Args) -> Result<()> {
    let mut run = Run::start("mask-gen", ctx.seed);
    let (phi, output) = match args.kind {
        Kind::Mls { order, repeats, output } => (mls_vector(order, repeats)?, output),
        Kind::Random { k, output } => (random_vector(k, ctx.seed)?, output),
    };
    let pgm = save_mask(&output.out, &phi, output.feature_size)?;
    run.output(&output.out)?;
    run.output(&pgm)?;
    println!("wrote {} ({} entries)", output.out.display(), phi.len());
    run.finish(&manifest_path(&output.out))
}
