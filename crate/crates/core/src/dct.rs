//! Orthonormal type-II 2D DCT and its inverse.
//!
//! The 1D transforms come from `rustdct`, which computes the unnormalised
//! DCT-II/DCT-III pair; the orthonormal scale factors are applied here so that
//! `idct2(dct2(y)) == y` and the transform preserves the Frobenius norm.

use std::sync::Arc;

use rustdct::{DctPlanner, TransformType2And3};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Planned separable 2D transform for a fixed `rows x cols` shape.
///
/// Planning is the expensive part of `rustdct`; reuse one of these when the
/// same shape is transformed repeatedly (every frame of a stream, every epoch
/// of filter training).
#[derive(Clone)]
pub struct Dct2d {
    rows: usize,
    cols: usize,
    row_plan: Arc<dyn TransformType2And3<f64>>,
    col_plan: Arc<dyn TransformType2And3<f64>>,
}

impl std::fmt::Debug for Dct2d {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dct2d")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish()
    }
}

impl Dct2d {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "dct: dimensions must be positive, got {rows}x{cols}"
            )));
        }
        let mut planner = DctPlanner::new();
        Ok(Dct2d {
            rows,
            cols,
            row_plan: planner.plan_dct2(cols),
            col_plan: planner.plan_dct2(rows),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn check(&self, m: &Mat) -> Result<()> {
        if m.shape() != (self.rows, self.cols) {
            return Err(Error::invalid(format!(
                "dct planned for {}x{}, got {}x{}",
                self.rows,
                self.cols,
                m.rows(),
                m.cols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, m: &Mat) -> Result<Mat> {
        self.check(m)?;
        let mut work = m.clone();
        rows_forward(&mut work, self.row_plan.as_ref());
        let mut t = work.transpose();
        rows_forward(&mut t, self.col_plan.as_ref());
        Ok(t.transpose())
    }

    pub fn inverse(&self, m: &Mat) -> Result<Mat> {
        self.check(m)?;
        let mut t = m.transpose();
        rows_inverse(&mut t, self.col_plan.as_ref());
        let mut work = t.transpose();
        rows_inverse(&mut work, self.row_plan.as_ref());
        Ok(work)
    }
}

fn rows_forward(m: &mut Mat, plan: &dyn TransformType2And3<f64>) {
    let n = m.cols();
    let dc = (1.0 / n as f64).sqrt();
    let ac = (2.0 / n as f64).sqrt();
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        plan.process_dct2(row);
        row[0] *= dc;
        for v in &mut row[1..] {
            *v *= ac;
        }
    }
}

fn rows_inverse(m: &mut Mat, plan: &dyn TransformType2And3<f64>) {
    let n = m.cols();
    // DCT-III in rustdct halves the first input; undo that in the prescale.
    let dc = 2.0 * (1.0 / n as f64).sqrt();
    let ac = (2.0 / n as f64).sqrt();
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        row[0] *= dc;
        for v in &mut row[1..] {
            *v *= ac;
        }
        plan.process_dct3(row);
    }
}

/// Orthonormal 2D DCT-II, rows first then columns.
pub fn dct2(m: &Mat) -> Result<Mat> {
    Dct2d::new(m.rows(), m.cols())?.forward(m)
}

/// Inverse of [`dct2`].
pub fn idct2(m: &Mat) -> Result<Mat> {
    Dct2d::new(m.rows(), m.cols())?.inverse(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    /// Direct O(n^2 m^2) evaluation of the orthonormal DCT-II.
    fn naive_dct2(m: &Mat) -> Mat {
        let (r, s) = m.shape();
        let alpha = |k: usize, n: usize| {
            if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            }
        };
        Mat::from_fn(r, s, |u, v| {
            let mut acc = 0.0;
            for i in 0..r {
                for j in 0..s {
                    acc += m.get(i, j)
                        * (PI * (i as f64 + 0.5) * u as f64 / r as f64).cos()
                        * (PI * (j as f64 + 0.5) * v as f64 / s as f64).cos();
                }
            }
            alpha(u, r) * alpha(v, s) * acc
        })
    }

    #[test]
    fn matches_direct_formula() {
        let m = Mat::from_fn(7, 10, |i, j| ((i * 31 + j * 17) % 13) as f64 / 13.0);
        let got = dct2(&m).unwrap();
        assert!(got.max_abs_diff(&naive_dct2(&m)).unwrap() < 1e-12);
    }

    #[test]
    fn constant_image_is_dc_only() {
        let c = 0.37;
        let (r, s) = (12, 20);
        let d = dct2(&Mat::filled(r, s, c)).unwrap();
        assert!((d.get(0, 0) - c * ((r * s) as f64).sqrt()).abs() < 1e-12);
        let rest: f64 = d.as_slice()[1..].iter().map(|v| v.abs()).sum();
        assert!(rest < 1e-12);
    }

    #[test]
    fn roundtrip_64() {
        let y = Mat::from_fn(64, 64, |i, j| ((i * 7919 + j * 104729) % 1000) as f64 / 999.0);
        let back = idct2(&dct2(&y).unwrap()).unwrap();
        assert!(back.max_abs_diff(&y).unwrap() <= 1e-9);
    }

    #[test]
    fn one_by_one_and_wrong_shape() {
        let m = Mat::filled(1, 1, 3.0);
        assert_eq!(dct2(&m).unwrap().get(0, 0), 3.0);
        let plan = Dct2d::new(4, 4).unwrap();
        assert!(plan.forward(&Mat::zeros(4, 5)).is_err());
        assert!(Dct2d::new(0, 4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn parseval_and_inverse(r in 1usize..40, s in 1usize..40, seed in any::<u64>()) {
            let mut state = seed | 1;
            let y = Mat::from_fn(r, s, |_, _| {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                (state % 10_000) as f64 / 10_000.0 - 0.5
            });
            let d = dct2(&y).unwrap();
            let n = y.frobenius_norm();
            prop_assert!((d.frobenius_norm() - n).abs() <= 1e-9 * n.max(1e-300));
            prop_assert!(idct2(&d).unwrap().max_abs_diff(&y).unwrap() <= 1e-9);
        }
    }
}
