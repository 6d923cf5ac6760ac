use std::path::PathBuf;

use anyhow::{bail, Context as _, Result};
use clap::Subcommand;
use serde::{Deserialize, Serialize};

use lensless_core::tactile::{
    calibrate_lut, depth_from_image, gradients_from_image, marker_grid, render_markers, simulate_tactile_image,
    track_markers, DepthMap, GradientLUT, LightingConfig, MarkerField, SpherePress, CONTACT_THRESHOLD_MM,
};
use lensless_core::{io, ImageRGB};

use crate::config::{list_frames, load_frame, load_gray_frame, parse_list, Context, Frame};
use crate::manifest::{manifest_path, Run};

#[derive(clap::Args, Debug)]
pub struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Build a colour-to-gradient LUT from rendered sphere presses.
    CalibrateLut {
        #[arg(short, long)]
        out: PathBuf,
        /// Indenter radius in mm.
        #[arg(long, default_value_t = 3.0)]
        radius: f64,
        /// Comma-separated press depths in mm.
        #[arg(long, default_value = "0.5,1.0,1.5")]
        depths: String,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 200)]
        size: usize,
        /// Pixel pitch in mm.
        #[arg(long, default_value_t = 0.04)]
        pitch: f64,
        #[arg(long, default_value_t = 32)]
        bins: usize,
    },
    /// Render a sphere press (press 0 gives the background frame).
    Render {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4.0)]
        radius: f64,
        #[arg(long, default_value_t = 0.5)]
        press: f64,
        #[arg(long, default_value_t = 200)]
        size: usize,
        #[arg(long, default_value_t = 0.04)]
        pitch: f64,
        /// Indenter centre as `row,col` in pixels; the image centre by default.
        #[arg(long)]
        center: Option<String>,
    },
    /// Recover a depth map from a tactile frame.
    Depth {
        /// Tactile frame (ppm).
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long)]
        lut: Option<PathBuf>,
        /// Frame of the sensor with nothing touching it.
        #[arg(long)]
        background: PathBuf,
        /// Output directory: `depth.ltm`, `depth.pgm`, `summary.json`.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Render a marker grid drifting by a constant step per frame.
    RenderMarkers {
        /// Output directory of `frame_XXXX.pgm`.
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        grid: usize,
        /// Marker pitch in pixels.
        #[arg(long, default_value_t = 12.0)]
        spacing: f64,
        #[arg(long, default_value_t = 3.0)]
        radius: f64,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        /// Per-frame shift as `du,dv` in pixels.
        #[arg(long, default_value = "0.3,-0.2", allow_hyphen_values = true)]
        step: String,
    },
    /// Track markers through a directory of grayscale frames.
    Markers {
        /// Directory of frames, processed in name order; the first is the reference.
        #[arg(long)]
        frames: PathBuf,
        /// CSV of the final field: id,u,v,du,dv,lost.
        #[arg(short, long)]
        out: PathBuf,
    },
}

/// LUT plus the rendering conditions it was calibrated under.
#[derive(Serialize, Deserialize)]
struct LutFile {
    pixel_pitch: f64,
    lighting: LightingConfig,
    lut: GradientLUT,
}

#[derive(Serialize)]
struct DepthSummary {
    max_depth_mm: f64,
    contact_pixels: usize,
    contact_threshold_mm: f64,
    lut_hit_rate: f64,
}

fn load_rgb(path: &std::path::Path) -> Result<ImageRGB> {
    match load_frame(path)? {
        Frame::Rgb(img) => Ok(img),
        Frame::Gray(_) => bail!("{}: tactile frames must be RGB (ppm)", path.display()),
    }
}

pub fn run(ctx: &Context, args: Args) -> Result<()> {
    match args.cmd {
        Cmd::CalibrateLut {
            out,
            radius,
            depths,
            size,
            pitch,
            bins,
        } => {
            let mut run = Run::start("tactile calibrate-lut", ctx.seed);
            let lighting = LightingConfig::default();
            let c = ((size as f64 - 1.0) / 2.0, (size as f64 - 1.0) / 2.0);
            let presses = parse_list(&depths)?
                .into_iter()
                .map(|h| {
                    let d = DepthMap::sphere(size, size, pitch, radius, h, c)?;
                    Ok(SpherePress {
                        image: simulate_tactile_image(&d, &lighting)?,
                        press: h,
                        center: c,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let lut = calibrate_lut(&presses, radius, pitch, bins)?;
            println!("LUT coverage: {:.1}% of {}^3 cells", 100.0 * lut.coverage(), bins);
            io::save_json(
                &out,
                &LutFile {
                    pixel_pitch: pitch,
                    lighting,
                    lut,
                },
            )?;
            run.output(&out)?;
            run.finish(&manifest_path(&out))
        }
        Cmd::Render {
            out,
            radius,
            press,
            size,
            pitch,
            center,
        } => {
            let mut run = Run::start("tactile render", ctx.seed);
            let c = match center {
                Some(s) => match parse_list(&s)?.as_slice() {
                    [r, c] => (*r, *c),
                    _ => bail!("--center expects row,col"),
                },
                None => ((size as f64 - 1.0) / 2.0, (size as f64 - 1.0) / 2.0),
            };
            let d = if press > 0.0 {
                DepthMap::sphere(size, size, pitch, radius, press, c)?
            } else {
                DepthMap::flat(size, size, pitch)?
            };
            let img = simulate_tactile_image(&d, &LightingConfig::default())?;
            io::save_image(&out, &img)?;
            io::save_mat(out.with_extension("depth.ltm"), d.grid())?;
            run.output(&out)?;
            run.output(&out.with_extension("depth.ltm"))?;
            run.finish(&manifest_path(&out))
        }
        Cmd::Depth {
            input,
            lut,
            background,
            out,
        } => {
            let mut run = Run::start("tactile depth", ctx.seed);
            let lut_path = ctx.path_or(lut, &ctx.cfg.paths.lut, "lut")?;
            let lf: LutFile =
                io::load_json(&lut_path).with_context(|| format!("reading LUT {}", lut_path.display()))?;
            let img = load_rgb(&input)?;
            let bg = load_rgb(&background)?;
            for p in [&lut_path, &input, &background] {
                run.input(p)?;
            }
            let (_, _, hit_rate) = gradients_from_image(&img, &lf.lut, &bg)?;
            let depth = depth_from_image(&img, &lf.lut, &bg, lf.pixel_pitch)?;
            std::fs::create_dir_all(&out)?;
            io::save_mat(out.join("depth.ltm"), depth.grid())?;
            io::save_gray(out.join("depth.pgm"), &depth.to_gray())?;
            let summary = DepthSummary {
                max_depth_mm: depth.grid().max(),
                contact_pixels: depth.contact_mask(CONTACT_THRESHOLD_MM).iter().filter(|&&b| b).count(),
                contact_threshold_mm: CONTACT_THRESHOLD_MM,
                lut_hit_rate: hit_rate,
            };
            io::save_json(out.join("summary.json"), &summary)?;
            println!(
                "max depth {:.4} mm, {} contact pixels",
                summary.max_depth_mm, summary.contact_pixels
            );
            run.output(&out)?;
            run.finish(&out.join("manifest.json"))
        }
        Cmd::RenderMarkers {
            out,
            grid,
            spacing,
            radius,
            frames,
            step,
        } => {
            let mut run = Run::start("tactile render-markers", ctx.seed);
            let [du, dv] = parse_list(&step)?[..] else {
                bail!("--step expects du,dv");
            };
            let margin = 2.0 * spacing;
            let side = (2.0 * margin + spacing * (grid as f64 - 1.0)).ceil() as usize;
            let base = marker_grid(grid, spacing, (margin, margin));
            for t in 0..frames {
                let pos: Vec<(f64, f64)> = base
                    .iter()
                    .map(|p| (p.0 + du * t as f64, p.1 + dv * t as f64))
                    .collect();
                io::save_gray(
                    out.join(format!("frame_{t:04}.pgm")),
                    &render_markers(side, side, &pos, radius),
                )?;
            }
            run.output(&out)?;
            run.finish(&out.join("manifest.json"))
        }
        Cmd::Markers { frames, out } => {
            let mut run = Run::start("tactile markers", ctx.seed);
            let files = list_frames(&frames)?;
            let mut field: Option<MarkerField> = None;
            for f in &files {
                let frame = load_gray_frame(f)?;
                field = Some(track_markers(&frame, field.as_ref()));
            }
            let field = field.expect("at least one frame");
            run.input(&frames)?;
            io::save_json(out.with_extension("json"), &field)?;
            std::fs::write(&out, field.to_csv()).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "{} markers over {} frames, {} lost",
                field.len(),
                files.len(),
                field.lost.iter().filter(|&&l| l).count()
            );
            run.output(&out)?;
            run.finish(&manifest_path(&out))
        }
    }
}
