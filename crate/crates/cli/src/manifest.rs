use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context as _, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use lensless_core::io;

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    args: Vec<String>,
    seed: u64,
    inputs: &'a [FileHash],
    outputs: &'a [FileHash],
    wall_ms: f64,
}

/// Records the files a command reads and writes, then writes a manifest
/// with their SHA-256 digests.
pub struct Run {
    command: &'static str,
    seed: u64,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
    start: Instant,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for e in entries {
        if e.file_name().is_some_and(|n| n == "manifest.json") {
            continue;
        }
        out.extend(files_under(&e)?);
    }
    Ok(out)
}

impl Run {
    pub fn start(command: &'static str, seed: u64) -> Self {
        Run {
            command,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        }
    }

    /// Registers a file, or every file below a directory.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        for p in files_under(path)? {
            let sha256 = sha256_file(&p)?;
            self.inputs.push(FileHash { path: p, sha256 });
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        for p in files_under(path)? {
            let sha256 = sha256_file(&p)?;
            self.outputs.push(FileHash { path: p, sha256 });
        }
        Ok(())
    }

    pub fn finish(self, manifest_path: &Path) -> Result<()> {
        let m = Manifest {
            command: self.command,
            args: std::env::args().skip(1).collect(),
            seed: self.seed,
            inputs: &self.inputs,
            outputs: &self.outputs,
            wall_ms: self.start.elapsed().as_secs_f64() * 1e3,
        };
        io::save_json(manifest_path, &m)?;
        Ok(())
    }
}

/// `dir/manifest.json` for directory outputs, `file.manifest.json` otherwise.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.json")
    } else {
        out.with_extension("manifest.json")
    }
}
