//! On-disk formats.
//!
//! * `LTM1` matrices: the 8-byte magic `b"LTMAT1\n\0"`, rows and cols as
//!   little-endian `u32`, then `rows * cols` little-endian binary32 values in
//!   row-major order.
//! * Images: binary PGM (`P5`) for one plane and PPM (`P6`) for RGB, always
//!   with maxval 65535 (big-endian 16-bit samples). Values in `[0, 1]` map to
//!   `round(v * 65535)`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mat::{ImageRGB, Mat};

pub const LTM_MAGIC: &[u8; 8] = b"LTMAT1\n\0";
const MAXVAL: u32 = 65535;

pub fn encode_mat(m: &Mat) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::invalid(format!("{} rows do not fit in u32", m.rows())))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::invalid(format!("{} cols do not fit in u32", m.cols())))?;
    let mut out = Vec::with_capacity(16 + 4 * m.as_slice().len());
    out.extend_from_slice(LTM_MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for &v in m.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_mat(bytes: &[u8]) -> Result<Mat> {
    if bytes.len() < 8 || &bytes[..8] != LTM_MAGIC {
        let offset = bytes
            .iter()
            .zip(LTM_MAGIC)
            .position(|(a, b)| a != b)
            .unwrap_or(bytes.len().min(8));
        return Err(Error::format(
            offset as u64,
            format!("expected magic {:?}", String::from_utf8_lossy(LTM_MAGIC)),
        ));
    }
    if bytes.len() < 16 {
        return Err(Error::format(bytes.len() as u64, "truncated LTM1 header"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(8, format!("zero dimension {rows}x{cols}")));
    }
    let count = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::invalid(format!("dimension overflow: {rows}x{cols}")))?;
    let payload = &bytes[16..];
    if payload.len() != count {
        return Err(Error::format(
            16 + payload.len().min(count) as u64,
            format!(
                "expected {count} payload bytes for {rows}x{cols}, found {}",
                payload.len()
            ),
        ));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(16 + 4 * pos as u64, "non-finite value"));
    }
    Mat::from_vec(rows, cols, data)
}

pub fn save_mat(path: impl AsRef<Path>, m: &Mat) -> Result<()> {
    write_atomic(path.as_ref(), &encode_mat(m)?)
}

pub fn load_mat(path: impl AsRef<Path>) -> Result<Mat> {
    decode_mat(&read(path.as_ref())?)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * MAXVAL as f64).round() as u16
}

fn encode_pnm(magic: &str, planes: &[&Mat]) -> Vec<u8> {
    let (h, w) = planes[0].shape();
    let mut out = format!("{magic}\n{w} {h}\n{MAXVAL}\n").into_bytes();
    out.reserve(h * w * planes.len() * 2);
    for i in 0..h {
        for j in 0..w {
            for p in planes {
                out.extend_from_slice(&quantize(p.get(i, j)).to_be_bytes());
            }
        }
    }
    out
}

pub fn encode_pgm(m: &Mat) -> Vec<u8> {
    encode_pnm("P5", &[m])
}

pub fn encode_ppm(img: &ImageRGB) -> Vec<u8> {
    let [r, g, b] = img.channels();
    encode_pnm("P6", &[r, g, b])
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || (bytes[..2] != *b"P5" && bytes[..2] != *b"P6") {
        return Err(Error::format(0, "expected magic \"P5\" or \"P6\""));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, "expected decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::format(start as u64, "header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(pos as u64, "expected single whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(2, format!("zero dimension {width}x{height}")));
    }
    if maxval == 0 || maxval > MAXVAL as u64 {
        return Err(Error::format(pos as u64, format!("maxval {maxval} out of range")));
    }
    let width = usize::try_from(width).map_err(|_| Error::invalid("width overflow"))?;
    let height = usize::try_from(height).map_err(|_| Error::invalid("height overflow"))?;
    Ok(Header {
        magic: [bytes[0], bytes[1]],
        width,
        height,
        maxval: maxval as u32,
        data_offset: pos + 1,
    })
}

fn decode_planes(bytes: &[u8], expect_channels: usize) -> Result<Vec<Mat>> {
    let h = parse_header(bytes)?;
    let channels = if h.magic == *b"P5" { 1 } else { 3 };
    if channels != expect_channels {
        return Err(Error::format(
            0,
            format!("expected magic \"{}\"", if expect_channels == 1 { "P5" } else { "P6" }),
        ));
    }
    let sample_bytes = if h.maxval > 255 { 2 } else { 1 };
    let need = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(channels * sample_bytes))
        .ok_or_else(|| Error::invalid("image dimension overflow"))?;
    let payload = &bytes[h.data_offset..];
    if payload.len() < need {
        return Err(Error::format(
            (h.data_offset + payload.len()) as u64,
            format!("truncated pixel data: need {need} bytes, found {}", payload.len()),
        ));
    }
    let scale = 1.0 / h.maxval as f64;
    let mut planes = vec![Vec::with_capacity(h.width * h.height); channels];
    for (k, chunk) in payload[..need].chunks_exact(sample_bytes).enumerate() {
        let raw = if sample_bytes == 2 {
            u16::from_be_bytes([chunk[0], chunk[1]]) as u32
        } else {
            chunk[0] as u32
        };
        if raw > h.maxval {
            return Err(Error::format(
                (h.data_offset + k * sample_bytes) as u64,
                "sample exceeds maxval",
            ));
        }
        planes[k % channels].push(raw as f64 * scale);
    }
    planes
        .into_iter()
        .map(|p| Mat::from_vec(h.height, h.width, p))
        .collect()
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Mat> {
    Ok(decode_planes(bytes, 1)?.remove(0))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRGB> {
    let mut p = decode_planes(bytes, 3)?;
    let b = p.pop().unwrap();
    let g = p.pop().unwrap();
    let r = p.pop().unwrap();
    ImageRGB::new(r, g, b)
}

/// Saves one plane as 16-bit PGM; values are clamped into `[0, 1]`.
pub fn save_gray(path: impl AsRef<Path>, m: &Mat) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pgm(m))
}

pub fn load_gray(path: impl AsRef<Path>) -> Result<Mat> {
    decode_pgm(&read(path.as_ref())?)
}

pub fn save_image(path: impl AsRef<Path>, img: &ImageRGB) -> Result<()> {
    write_atomic(path.as_ref(), &encode_ppm(img))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRGB> {
    decode_ppm(&read(path.as_ref())?)
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path.as_ref(), &bytes)
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_slice(&read(path.as_ref())?)?)
}
