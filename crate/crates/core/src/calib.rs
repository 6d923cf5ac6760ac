//! Slit-scan calibration of the system matrices.
//!
//! A horizontal slit `e_i 1^T` images to `p_oi (Qo 1)^T + p_ci (Qc 1)^T`,
//! a rank-2 matrix whose left factors are the i-th columns of `Po` and `Pc`.
//! Vertical slits give the columns of `Qo` and `Qc` the same way.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::mat::Mat;
use crate::sysmat::{self, SystemMatrices};

pub const MAX_REFINE_ITERATIONS: usize = 50;
pub const REFINE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlitAxis {
    Horizontal,
    Vertical,
}

/// Slit measurements: `horizontal[i]` images scene row `i`, `vertical[j]`
/// images scene column `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibSet {
    pub horizontal: Vec<Mat>,
    pub vertical: Vec<Mat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibManifest {
    pub scene_rows: usize,
    pub scene_cols: usize,
    pub meas_rows: usize,
    pub meas_cols: usize,
    pub noise_sigma: f64,
    pub source: String,
}

impl CalibSet {
    pub fn new(horizontal: Vec<Mat>, vertical: Vec<Mat>) -> Result<Self> {
        let first = horizontal
            .first()
            .or(vertical.first())
            .ok_or_else(|| Error::invalid("calibration set is empty"))?
            .shape();
        if horizontal.is_empty() || vertical.is_empty() {
            return Err(Error::invalid(
                "calibration set needs both horizontal and vertical slits",
            ));
        }
        for (name, list) in [("h", &horizontal), ("v", &vertical)] {
            if let Some(i) = list.iter().position(|m| m.shape() != first) {
                return Err(Error::invalid(format!(
                    "calibration image {name}_{i:04} is {:?}, expected {first:?}",
                    list[i].shape()
                )));
            }
        }
        Ok(CalibSet { horizontal, vertical })
    }

    pub fn scene_shape(&self) -> (usize, usize) {
        (self.horizontal.len(), self.vertical.len())
    }

    pub fn meas_shape(&self) -> (usize, usize) {
        self.horizontal[0].shape()
    }

    /// Writes `h_0000.ltm ...`, `v_0000.ltm ...` and `calib.json`.
    pub fn save(&self, dir: impl AsRef<Path>, noise_sigma: f64, source: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (i, m) in self.horizontal.iter().enumerate() {
            io::save_mat(dir.join(format!("h_{i:04}.ltm")), m)?;
        }
        for (j, m) in self.vertical.iter().enumerate() {
            io::save_mat(dir.join(format!("v_{j:04}.ltm")), m)?;
        }
        let (scene_rows, scene_cols) = self.scene_shape();
        let (meas_rows, meas_cols) = self.meas_shape();
        io::save_json(
            dir.join("calib.json"),
            &CalibManifest {
                scene_rows,
                scene_cols,
                meas_rows,
                meas_cols,
                noise_sigma,
                source: source.to_string(),
            },
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, CalibManifest)> {
        let dir = dir.as_ref();
        let manifest: CalibManifest = io::load_json(dir.join("calib.json"))?;
        let h = (0..manifest.scene_rows)
            .map(|i| io::load_mat(dir.join(format!("h_{i:04}.ltm"))))
            .collect::<Result<Vec<_>>>()?;
        let v = (0..manifest.scene_cols)
            .map(|j| io::load_mat(dir.join(format!("v_{j:04}.ltm"))))
            .collect::<Result<Vec<_>>>()?;
        let cs = CalibSet::new(h, v)?;
        if cs.meas_shape() != (manifest.meas_rows, manifest.meas_cols) {
            return Err(Error::invalid(format!(
                "calibration images are {:?}, manifest says {}x{}",
                cs.meas_shape(),
                manifest.meas_rows,
                manifest.meas_cols
            )));
        }
        Ok((cs, manifest))
    }
}

pub fn make_slit_scene(axis: SlitAxis, index: usize, dims: (usize, usize)) -> Result<Mat> {
    let (n, m) = dims;
    let limit = match axis {
        SlitAxis::Horizontal => n,
        SlitAxis::Vertical => m,
    };
    if index >= limit {
        return Err(Error::invalid(format!(
            "slit index {index} out of range for {axis:?} slits on a {n}x{m} scene"
        )));
    }
    Ok(Mat::from_fn(n, m, |i, j| match axis {
        SlitAxis::Horizontal => (i == index) as u8 as f64,
        SlitAxis::Vertical => (j == index) as u8 as f64,
    }))
}

/// Renders every slit through `sm`, each with independent noise.
pub fn simulate_calib_set(sm: &SystemMatrices, noise_sigma: f64, seed: u64) -> Result<CalibSet> {
    let dims = sm.scene_shape();
    let render = |axis: SlitAxis, count: usize| -> Result<Vec<Mat>> {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let mut y = sysmat::forward(sm, &make_slit_scene(axis, i, dims)?, 0.0, 0)?;
                if noise_sigma > 0.0 {
                    sysmat::add_noise(&mut y, noise_sigma, seed, &format!("calib/{axis:?}/{i}"));
                }
                Ok(y)
            })
            .collect()
    };
    CalibSet::new(
        render(SlitAxis::Horizontal, dims.0)?,
        render(SlitAxis::Vertical, dims.1)?,
    )
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Splits each image into `p_o q_o^T + p_c q_c^T` by successive projection
/// onto `q_o` then `q_c`; the recovered vectors become the columns of the
/// returned `(Po, Pc)`.
pub fn decompose_given_qo_qc(images: &[Mat], q_o: &[f64], q_c: &[f64]) -> Result<(Mat, Mat)> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to decompose"))?;
    let (r, s) = first.shape();
    if q_o.len() != s || q_c.len() != s {
        return Err(Error::invalid(format!(
            "q vectors have lengths {} and {}, images have {s} columns",
            q_o.len(),
            q_c.len()
        )));
    }
    let (no, nc) = (dot(q_o, q_o), dot(q_c, q_c));
    if !(no > 0.0) || !(nc > 0.0) {
        return Err(Error::invalid("q_o and q_c must be nonzero"));
    }
    let cols: Vec<(Vec<f64>, Vec<f64>)> = images
        .par_iter()
        .map(|y| {
            if y.shape() != (r, s) {
                return Err(Error::invalid(format!("image is {:?}, expected {r}x{s}", y.shape())));
            }
            let mut po = vec![0.0; r];
            let mut pc = vec![0.0; r];
            for i in 0..r {
                let row = y.row(i);
                po[i] = dot(row, q_o) / no;
                let deflated: f64 = row
                    .iter()
                    .zip(q_o)
                    .zip(q_c)
                    .map(|((v, a), b)| (v - po[i] * a) * b)
                    .sum();
                pc[i] = deflated / nc;
            }
            Ok((po, pc))
        })
        .collect::<Result<_>>()?;
    let po = Mat::from_fn(r, cols.len(), |i, k| cols[k].0[i]);
    let pc = Mat::from_fn(r, cols.len(), |i, k| cols[k].1[i]);
    Ok((po, pc))
}

/// Outcome of [`calibrate`]; a run that hits the iteration cap is returned
/// with `converged == false` rather than as an error.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub matrices: SystemMatrices,
    pub iterations: usize,
    pub converged: bool,
    /// Largest relative change among the four matrices in the last refinement.
    pub last_change: f64,
}

fn transposed(images: &[Mat]) -> Vec<Mat> {
    images.par_iter().map(Mat::transpose).collect()
}

/// Right singular vector of the largest singular value, sign fixed so its
/// largest-magnitude entry is positive.
fn leading_right_vector(m: &Mat) -> Result<Vec<f64>> {
    if m.frobenius_norm() == 0.0 || !m.is_finite() {
        return Err(Error::Calibration(
            "deflated centre image is zero or non-finite; cannot estimate q_c".into(),
        ));
    }
    let svd = faer::linalg::solvers::Svd::new_thin(m.view())
        .map_err(|e| Error::Calibration(format!("SVD of centre image failed: {e:?}")))?;
    let v = svd.V();
    let mut q: Vec<f64> = (0..v.nrows()).map(|i| v[(i, 0)]).collect();
    let peak = q
        .iter()
        .copied()
        .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
    if peak < 0.0 {
        q.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(q)
}

fn balance(a: &mut Mat, b: &mut Mat) {
    let (na, nb) = (a.frobenius_norm(), b.frobenius_norm());
    if na > 0.0 && nb > 0.0 {
        let c = (nb / na).sqrt();
        *a = a.scale(c);
        *b = b.scale(1.0 / c);
    }
}

fn rel_change(new: &Mat, old: &Mat) -> f64 {
    let denom = old.frobenius_norm().max(1e-300);
    new.sub(old)
        .map(|d| d.frobenius_norm() / denom)
        .unwrap_or(f64::INFINITY)
}

/// Initial estimate from row means and the centre slit, then alternating
/// refinement of the row-side and column-side factors.
pub fn calibrate(cs: &CalibSet) -> Result<Calibration> {
    calibrate_with(cs, MAX_REFINE_ITERATIONS, REFINE_TOLERANCE)
}

/// As [`calibrate`] with an explicit refinement cap and stopping tolerance.
pub fn calibrate_with(cs: &CalibSet, max_iterations: usize, tolerance: f64) -> Result<Calibration> {
    if !(tolerance >= 0.0) {
        return Err(Error::invalid(format!("tolerance must be >= 0, got {tolerance}")));
    }
    let (n, _) = cs.scene_shape();
    let (_, s) = cs.meas_shape();
    let vertical_t = transposed(&cs.vertical);

    let ones = vec![1.0; s];
    let mut po = Mat::from_fn(cs.meas_shape().0, n, |i, k| {
        cs.horizontal[k].row(i).iter().sum::<f64>() / s as f64
    });
    let centre = &cs.horizontal[n / 2];
    let p_mid = po.col(n / 2);
    let deflated = Mat::from_fn(centre.rows(), s, |i, j| centre.get(i, j) - p_mid[i]);
    let q_c = leading_right_vector(&deflated)?;
    let (_, mut pc) = decompose_given_qo_qc(&cs.horizontal, &ones, &q_c)?;
    let (mut qo, mut qc) = decompose_given_qo_qc(&vertical_t, &po.row_sums(), &pc.row_sums())?;
    balance(&mut po, &mut qo);
    balance(&mut pc, &mut qc);

    let mut last_change = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        let (npo, npc) = decompose_given_qo_qc(&cs.horizontal, &qo.row_sums(), &qc.row_sums())?;
        let (mut nqo, mut nqc) = decompose_given_qo_qc(&vertical_t, &npo.row_sums(), &npc.row_sums())?;
        let (mut npo, mut npc) = (npo, npc);
        balance(&mut npo, &mut nqo);
        balance(&mut npc, &mut nqc);
        last_change = [
            rel_change(&npo, &po),
            rel_change(&nqo, &qo),
            rel_change(&npc, &pc),
            rel_change(&nqc, &qc),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        (po, qo, pc, qc) = (npo, nqo, npc, nqc);
        if !last_change.is_finite() {
            return Err(Error::Calibration(format!(
                "refinement produced non-finite matrices at iteration {iterations}"
            )));
        }
        if last_change < tolerance {
            break;
        }
    }
    Ok(Calibration {
        matrices: SystemMatrices::new(po, qo, pc, qc)?,
        iterations,
        converged: last_change < tolerance,
        last_change,
    })
}

/// Relative Frobenius error of `candidate` against `reference` forward
/// images over a set of scenes.
pub fn forward_error(candidate: &SystemMatrices, reference: &SystemMatrices, scenes: &[Mat]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for x in scenes {
        let a = sysmat::forward(candidate, x, 0.0, 0)?;
        let b = sysmat::forward(reference, x, 0.0, 0)?;
        worst = worst.max(a.rel_error(&b)?);
    }
    Ok(worst)
}
