//! Image quality metrics: PSNR, SSIM and the L1 gradient magnitude used to
//! score intensity uniformity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// PSNR reported for identical inputs, keeping fitness arithmetic finite.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub grad_uniformity: f64,
}

/// Scores `estimate` against `reference` (both normalised to `peak`).
pub fn evaluate(estimate: &Mat, reference: &Mat, peak: f64) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(estimate, reference, peak)?,
        ssim: ssim_with_peak(estimate, reference, peak)?,
        grad_uniformity: grad_uniformity(estimate)?,
    })
}

pub fn mse(a: &Mat, b: &Mat) -> Result<f64> {
    a.check_same_shape(b, "mse")?;
    let n = a.as_slice().len() as f64;
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// `10 log10(peak^2 / MSE)`; identical inputs give [`PSNR_CAP_DB`].
pub fn psnr(a: &Mat, b: &Mat, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("psnr: peak must be positive, got {peak}")));
    }
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - half;
            (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering: output is `(r - w + 1) x (s - w + 1)`.
fn filter_valid(m: &[f64], rows: usize, cols: usize, w: &[f64]) -> Vec<f64> {
    let k = w.len();
    let oc = cols - k + 1;
    let or = rows - k + 1;
    let mut horiz = vec![0.0; rows * oc];
    for i in 0..rows {
        let row = &m[i * cols..(i + 1) * cols];
        for j in 0..oc {
            horiz[i * oc + j] = row[j..j + k].iter().zip(w).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; or * oc];
    for i in 0..or {
        for (t, wt) in w.iter().enumerate() {
            let src = &horiz[(i + t) * oc..(i + t + 1) * oc];
            let dst = &mut out[i * oc..(i + 1) * oc];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wt * s;
            }
        }
    }
    out
}

/// Mean local SSIM with the standard 11x11 Gaussian window and peak 1.
pub fn ssim(a: &Mat, b: &Mat) -> Result<f64> {
    ssim_with_peak(a, b, 1.0)
}

pub fn ssim_with_peak(a: &Mat, b: &Mat, peak: f64) -> Result<f64> {
    a.check_same_shape(b, "ssim")?;
    let (rows, cols) = a.shape();
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {rows}x{cols}"
        )));
    }
    if a == b {
        return Ok(1.0);
    }
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let w = gaussian_window();
    let x = a.as_slice();
    let y = b.as_slice();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let mu_x = filter_valid(x, rows, cols, &w);
    let mu_y = filter_valid(y, rows, cols, &w);
    let s_xx = filter_valid(&xx, rows, cols, &w);
    let s_yy = filter_valid(&yy, rows, cols, &w);
    let s_xy = filter_valid(&xy, rows, cols, &w);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = s_xx[i] - mx * mx;
        let vy = s_yy[i] - my * my;
        let cxy = s_xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok((total / mu_x.len() as f64).clamp(-1.0, 1.0))
}

/// L1 norms of the forward differences along rows (between neighbouring
/// columns) and along columns (between neighbouring rows).
pub fn grad_l1(m: &Mat) -> Result<(f64, f64)> {
    let (rows, cols) = m.shape();
    if rows < 2 || cols < 2 {
        return Err(Error::invalid(format!("grad_l1 needs at least 2x2, got {rows}x{cols}")));
    }
    let mut along_rows = 0.0;
    let mut along_cols = 0.0;
    for i in 0..rows {
        let row = m.row(i);
        along_rows += row.windows(2).map(|p| (p[1] - p[0]).abs()).sum::<f64>();
        if i + 1 < rows {
            let next = m.row(i + 1);
            along_cols += row.iter().zip(next).map(|(a, b)| (b - a).abs()).sum::<f64>();
        }
    }
    Ok((along_rows, along_cols))
}

/// `2MN / (||Gu||_1 + ||Gv||_1)`, floored so a perfectly flat image stays finite.
pub fn grad_uniformity(m: &Mat) -> Result<f64> {
    let (gu, gv) = grad_l1(m)?;
    let n = (m.rows() * m.cols()) as f64;
    Ok(2.0 * n / (gu + gv).max(1e-9))
}
