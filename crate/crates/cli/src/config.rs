use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use clap::Args;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use lensless_core::filter::FilterTrainConfig;
use lensless_core::maskopt::GaConfig;
use lensless_core::{io, rng, Geometry, ImageRGB, MaskVector, Mat};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub geometry: Option<Geometry>,
    /// Regulariser as a multiple of `max(sp) * max(sq)`.
    pub tau_factor: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub filter: FilterTrainConfig,
    pub ga: GaConfig,
    pub seed: Option<u64>,
    pub paths: Paths,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub sysmat: Option<PathBuf>,
    pub filter: Option<PathBuf>,
    pub lut: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(PipelineConfig::default());
        };
        let cfg: PipelineConfig = io::load_json(path).with_context(|| format!("reading config {}", path.display()))?;
        for p in [&cfg.paths.sysmat, &cfg.paths.filter, &cfg.paths.lut]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                bail!("config path {} does not exist", p.display());
            }
        }
        Ok(cfg)
    }
}

pub struct Context {
    pub cfg: PipelineConfig,
    pub seed: u64,
}

impl Context {
    /// Seed for one consumer, derived from the root seed and a domain tag.
    pub fn derive_seed(&self, tag: &str) -> u64 {
        rng::stream(self.seed, tag).next_u64()
    }

    pub fn noise_sigma(&self, flag: Option<f64>) -> f64 {
        flag.or(self.cfg.noise_sigma).unwrap_or(0.0)
    }

    pub fn path_or(&self, flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        match flag.or_else(|| fallback.clone()) {
            Some(p) => Ok(p),
            None => bail!("missing --{what} (and no paths.{what} in the config)"),
        }
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct GeometryArgs {
    /// Full-size sensor: 1280x1024 measurement, 512x400 scene.
    #[arg(long, conflicts_with_all = ["scene_size", "meas_size"])]
    pub table_one: bool,
    /// Square scene side for a scaled-down sensor.
    #[arg(long)]
    pub scene_size: Option<usize>,
    /// Square measurement side for a scaled-down sensor.
    #[arg(long)]
    pub meas_size: Option<usize>,
}

impl GeometryArgs {
    pub fn resolve(&self, ctx: &Context, default: (usize, usize)) -> Result<Geometry> {
        let g = if self.table_one {
            Geometry::table_one()
        } else if self.scene_size.is_some() || self.meas_size.is_some() {
            Geometry::desk(
                self.scene_size.unwrap_or(default.0),
                self.meas_size.unwrap_or(default.1),
            )
        } else if let Some(g) = &ctx.cfg.geometry {
            g.clone()
        } else {
            Geometry::desk(default.0, default.1)
        };
        g.validate()?;
        Ok(g)
    }
}

/// Shortest mask covering the larger sensor side, plus a 20% margin.
pub fn default_mask_len(g: &Geometry) -> usize {
    let side = g.meas_rows.max(g.meas_cols) as f64 * g.delta_sensor / g.delta_mask;
    (1.2 * side).ceil() as usize
}

pub fn load_mask(path: &Path) -> Result<MaskVector> {
    let m = io::load_mat(path).with_context(|| format!("loading mask {}", path.display()))?;
    Ok(MaskVector::from_values(m.as_slice())?)
}

pub fn save_mask(path: &Path, phi: &MaskVector, feature_size: f64) -> Result<PathBuf> {
    io::save_mat(path, &phi.to_mat())?;
    let pgm = path.with_extension("pgm");
    std::fs::write(&pgm, lensless_core::mask::assemble_mask(phi, feature_size).to_pgm())
        .with_context(|| format!("writing {}", pgm.display()))?;
    Ok(pgm)
}

#[derive(Clone, Debug)]
pub enum Frame {
    Gray(Mat),
    Rgb(ImageRGB),
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

pub fn is_frame_file(path: &Path) -> bool {
    matches!(extension(path).as_str(), "ltm" | "pgm" | "ppm")
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    let frame = match extension(path).as_str() {
        "ltm" => Frame::Gray(io::load_mat(path)?),
        "pgm" => Frame::Gray(io::load_gray(path)?),
        "ppm" => Frame::Rgb(io::load_image(path)?),
        other => bail!(
            "{}: unsupported frame format '{other}' (expected ltm, pgm or ppm)",
            path.display()
        ),
    };
    Ok(frame)
}

pub fn load_gray_frame(path: &Path) -> Result<Mat> {
    match load_frame(path)? {
        Frame::Gray(m) => Ok(m),
        Frame::Rgb(img) => Ok(img.luminance()),
    }
}

/// Frame files in a directory, sorted by name. When LTM1 files are present
/// only those are used, so PGM previews written beside them are skipped.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && is_frame_file(p));
    if files.iter().any(|p| extension(p) == "ltm") {
        files.retain(|p| extension(p) == "ltm");
    }
    files.sort();
    if files.is_empty() {
        bail!("{}: no ltm, pgm or ppm frames found", dir.display());
    }
    Ok(files)
}

pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .with_context(|| format!("'{t}' is not a number"))
        })
        .collect()
}
