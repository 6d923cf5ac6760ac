//! Synthetic scenes for training sets, fitness evaluation and fixtures.

use rand::Rng as _;

use crate::mat::Mat;
use crate::rng;

/// The all-ones scene used to score reconstruction uniformity.
pub fn white(rows: usize, cols: usize) -> Mat {
    Mat::filled(rows, cols, 1.0)
}

/// Smooth random scene in `[0.05, 0.95]`: a tilted plane plus a handful of
/// Gaussian blobs, loosely resembling a shaded membrane.
pub fn smooth_random(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut r = rng::stream(seed, "scene/smooth");
    let scale = rows.min(cols) as f64;
    let gx: f64 = r.random_range(-1.0..1.0);
    let gy: f64 = r.random_range(-1.0..1.0);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                r.random_range(0.0..rows as f64),
                r.random_range(0.0..cols as f64),
                r.random_range(0.08..0.3) * scale,
                r.random_range(-1.0..1.0),
            )
        })
        .collect();
    let raw = Mat::from_fn(rows, cols, |i, j| {
        let mut v = gx * i as f64 / rows as f64 + gy * j as f64 / cols as f64;
        for &(ci, cj, s, a) in &blobs {
            let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
            v += a * (-d2 / (2.0 * s * s)).exp();
        }
        v
    });
    normalise(&raw, 0.05, 0.95)
}

/// Bar-chart resolution target: three-bar groups at shrinking periods,
/// alternating orientation, on a light background.
pub fn bar_chart(rows: usize, cols: usize) -> Mat {
    let mut m = Mat::filled(rows, cols, 0.9);
    let mut period = (rows.min(cols) / 6).max(2);
    let mut top = 1usize;
    let mut left = 1usize;
    let mut horizontal = false;
    while period >= 2 && top + 5 * period / 2 < rows && left + 5 * period / 2 < cols {
        let span = 5 * period / 2;
        for b in 0..3 {
            let start = b * period;
            for a in 0..span {
                for w in 0..period / 2 {
                    let (i, j) = if horizontal {
                        (top + start + w, left + a)
                    } else {
                        (top + a, left + start + w)
                    };
                    if i < rows && j < cols {
                        m.set(i, j, 0.1);
                    }
                }
            }
        }
        if horizontal {
            top += span + period;
            left = 1 + left / 2;
            period = period * 2 / 3;
        } else {
            left += span + period;
        }
        horizontal = !horizontal;
    }
    m
}

fn normalise(m: &Mat, lo: f64, hi: f64) -> Mat {
    let (min, max) = (m.min(), m.max());
    let span = (max - min).max(1e-12);
    m.map(|v| lo + (hi - lo) * (v - min) / span)
}
