//! Tactile image simulation and interpretation: shading a depth map under
//! three coloured lights, recovering gradients through a colour look-up
//! table, integrating them back to depth, and tracking surface markers.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dct::Dct2d;
use crate::error::{Error, Result};
use crate::mat::{ImageRGB, Mat};

/// Depth above which a pixel counts as in contact, in mm.
pub const CONTACT_THRESHOLD_MM: f64 = 0.1;

/// Indentation depth in mm on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    grid: Mat,
    pixel_pitch: f64,
}

impl DepthMap {
    pub fn new(grid: Mat, pixel_pitch: f64) -> Result<Self> {
        if !(pixel_pitch > 0.0) || !pixel_pitch.is_finite() {
            return Err(Error::invalid(format!(
                "pixel pitch must be positive, got {pixel_pitch}"
            )));
        }
        if grid.min() < 0.0 || !grid.is_finite() {
            return Err(Error::invalid("depth map entries must be finite and >= 0"));
        }
        Ok(DepthMap { grid, pixel_pitch })
    }

    pub fn flat(rows: usize, cols: usize, pixel_pitch: f64) -> Result<Self> {
        DepthMap::new(Mat::zeros(rows, cols), pixel_pitch)
    }

    /// Sphere of `radius` mm pressed `press` mm into the surface, centred at
    /// pixel coordinates `center = (row, col)`.
    pub fn sphere(
        rows: usize,
        cols: usize,
        pixel_pitch: f64,
        radius: f64,
        press: f64,
        center: (f64, f64),
    ) -> Result<Self> {
        if !(radius > 0.0) || !(press >= 0.0) || press > radius {
            return Err(Error::invalid(format!(
                "sphere needs radius > 0 and 0 <= press <= radius (got {radius}, {press})"
            )));
        }
        let grid = Mat::from_fn(rows, cols, |i, j| {
            let r2 = ((i as f64 - center.0).powi(2) + (j as f64 - center.1).powi(2)) * pixel_pitch * pixel_pitch;
            if r2 >= radius * radius {
                0.0
            } else {
                (press - (radius - (radius * radius - r2).sqrt())).max(0.0)
            }
        });
        DepthMap::new(grid, pixel_pitch)
    }

    pub fn grid(&self) -> &Mat {
        &self.grid
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.pixel_pitch
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grid.shape()
    }

    /// Slopes `(d/dx, d/dy)` by central differences, one-sided at the border.
    /// `x` runs along columns, `y` along rows.
    pub fn gradients(&self) -> (Mat, Mat) {
        slopes(&self.grid, self.pixel_pitch)
    }

    /// Pixels deeper than `threshold` mm.
    pub fn contact_mask(&self, threshold: f64) -> Vec<bool> {
        self.grid.as_slice().iter().map(|&d| d > threshold).collect()
    }

    /// Grey image scaled so the deepest point is white.
    pub fn to_gray(&self) -> Mat {
        let peak = self.grid.max();
        if peak > 0.0 {
            self.grid.scale(1.0 / peak)
        } else {
            self.grid.clone()
        }
    }
}

/// Contact radius of a sphere of radius `r` pressed `h` deep: `sqrt(2rh - h^2)`.
pub fn contact_radius(r: f64, h: f64) -> f64 {
    (2.0 * r * h - h * h).max(0.0).sqrt()
}

/// Analytic slopes of [`DepthMap::sphere`]; zero outside the contact disc.
pub fn sphere_gradients(
    rows: usize,
    cols: usize,
    pixel_pitch: f64,
    radius: f64,
    press: f64,
    center: (f64, f64),
) -> (Mat, Mat) {
    let a = contact_radius(radius, press);
    let slope = |i: usize, j: usize, along_x: bool| {
        let dy = (i as f64 - center.0) * pixel_pitch;
        let dx = (j as f64 - center.1) * pixel_pitch;
        let r2 = dx * dx + dy * dy;
        if r2 >= a * a {
            return 0.0;
        }
        // depth = press - radius + sqrt(radius^2 - r^2)
        let s = (radius * radius - r2).sqrt();
        if along_x {
            -dx / s
        } else {
            -dy / s
        }
    };
    (
        Mat::from_fn(rows, cols, |i, j| slope(i, j, true)),
        Mat::from_fn(rows, cols, |i, j| slope(i, j, false)),
    )
}

fn slopes(m: &Mat, pitch: f64) -> (Mat, Mat) {
    let (rows, cols) = m.shape();
    let diff = |a: f64, b: f64, span: f64| (b - a) / (span * pitch);
    let gx = Mat::from_fn(rows, cols, |i, j| match (j, cols) {
        (_, 1) => 0.0,
        (0, _) => diff(m.get(i, 0), m.get(i, 1), 1.0),
        (j, c) if j == c - 1 => diff(m.get(i, j - 1), m.get(i, j), 1.0),
        (j, _) => diff(m.get(i, j - 1), m.get(i, j + 1), 2.0),
    });
    let gy = Mat::from_fn(rows, cols, |i, j| match (i, rows) {
        (_, 1) => 0.0,
        (0, _) => diff(m.get(0, j), m.get(1, j), 1.0),
        (i, r) if i == r - 1 => diff(m.get(i - 1, j), m.get(i, j), 1.0),
        (i, _) => diff(m.get(i - 1, j), m.get(i + 1, j), 2.0),
    });
    (gx, gy)
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(m: &Mat, sigma: f64) -> Mat {
    if sigma <= 0.0 {
        return m.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let (rows, cols) = m.shape();
    let along_rows = Mat::from_fn(rows, cols, |i, j| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, w)| w * m.get(i, mirror(j as isize + k as isize - radius, cols)))
            .sum()
    });
    Mat::from_fn(rows, cols, |i, j| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, w)| w * along_rows.get(mirror(i as isize + k as isize - radius, rows), j))
            .sum()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LightingConfig {
    /// Gaussian smoothing of the depth map, in pixels.
    pub sigma_px: f64,
    pub ambient: f64,
    pub diffuse: f64,
    /// Light elevation above the surface plane, degrees.
    pub elevation_deg: f64,
    /// Azimuths of the red, green and blue lights, degrees.
    pub azimuths_deg: [f64; 3],
    /// Optional `(strength, shininess)` Phong specular term, viewer overhead.
    pub specular: Option<(f64, f64)>,
}

impl Default for LightingConfig {
    fn default() -> Self {
        LightingConfig {
            sigma_px: 1.5,
            ambient: 0.1,
            diffuse: 0.8,
            elevation_deg: 60.0,
            azimuths_deg: [0.0, 120.0, 240.0],
            specular: None,
        }
    }
}

impl LightingConfig {
    fn light_dir(&self, c: usize) -> [f64; 3] {
        let el = self.elevation_deg.to_radians();
        let az = self.azimuths_deg[c].to_radians();
        [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
    }

    /// Colour of a surface patch whose depth has slopes `(gx, gy)`.
    ///
    /// The surface height is `-depth`, so its upward normal is
    /// `(gx, gy, 1) / |.|`.
    pub fn shade(&self, gx: f64, gy: f64) -> [f64; 3] {
        let norm = (gx * gx + gy * gy + 1.0).sqrt();
        let n = [gx / norm, gy / norm, 1.0 / norm];
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let l = self.light_dir(c);
            let ndl = n[0] * l[0] + n[1] * l[1] + n[2] * l[2];
            let mut v = self.ambient + self.diffuse * ndl.max(0.0);
            if let Some((ks, shininess)) = self.specular {
                if ndl > 0.0 {
                    // reflection of l about n, viewer along +z
                    let rz = 2.0 * ndl * n[2] - l[2];
                    v += ks * rz.max(0.0).powf(shininess);
                }
            }
            *o = v.clamp(0.0, 1.0);
        }
        out
    }
}

pub fn simulate_tactile_image(depth: &DepthMap, lighting: &LightingConfig) -> Result<ImageRGB> {
    let smooth = gaussian_blur(depth.grid(), lighting.sigma_px);
    let (gx, gy) = slopes(&smooth, depth.pixel_pitch());
    let (rows, cols) = depth.shape();
    let mut planes = [Mat::zeros(rows, cols), Mat::zeros(rows, cols), Mat::zeros(rows, cols)];
    for i in 0..rows {
        for j in 0..cols {
            let c = lighting.shade(gx.get(i, j), gy.get(i, j));
            for (p, v) in planes.iter_mut().zip(c) {
                p.set(i, j, v);
            }
        }
    }
    let [r, g, b] = planes;
    ImageRGB::new(r, g, b)
}

/// Colour -> slope table over a `bins^3` grid spanning the calibration colours.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientLUT {
    bins: usize,
    lo: [f64; 3],
    hi: [f64; 3],
    gx: Vec<f64>,
    gy: Vec<f64>,
    /// Cells that received calibration samples (before infill).
    filled: Vec<bool>,
    background: [f64; 3],
}

/// One calibration frame: a rendered sphere press with known geometry.
#[derive(Clone, Debug)]
pub struct SpherePress {
    pub image: ImageRGB,
    pub press: f64,
    /// Sphere centre in pixel coordinates `(row, col)`.
    pub center: (f64, f64),
}

impl GradientLUT {
    /// A table with no samples; lookups fail until calibrated.
    pub fn uncalibrated(bins: usize) -> Self {
        GradientLUT {
            bins,
            lo: [0.0; 3],
            hi: [1.0; 3],
            gx: vec![0.0; bins * bins * bins],
            gy: vec![0.0; bins * bins * bins],
            filled: vec![false; bins * bins * bins],
            background: [0.0; 3],
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn background(&self) -> [f64; 3] {
        self.background
    }

    pub fn is_calibrated(&self) -> bool {
        self.filled.iter().any(|&f| f)
    }

    /// Fraction of cells holding calibration samples.
    pub fn coverage(&self) -> f64 {
        self.filled.iter().filter(|&&f| f).count() as f64 / self.filled.len() as f64
    }

    fn cell(&self, color: [f64; 3]) -> usize {
        let b = self.bins;
        let idx = |c: usize| {
            let t = (color[c] - self.lo[c]) / (self.hi[c] - self.lo[c]).max(1e-12);
            ((t * b as f64).floor() as isize).clamp(0, b as isize - 1) as usize
        };
        (idx(0) * b + idx(1)) * b + idx(2)
    }

    /// `(gx, gy, filled)` for a colour; `filled` is false when the value
    /// came from nearest-neighbour infill.
    pub fn lookup(&self, color: [f64; 3]) -> (f64, f64, bool) {
        let c = self.cell(color);
        (self.gx[c], self.gy[c], self.filled[c])
    }
}

/// Builds the table from sphere presses of known `radius`. Every pixel's
/// analytic slope is binned by its colour, cells average their samples, and
/// empty cells copy the nearest filled cell.
pub fn calibrate_lut(presses: &[SpherePress], radius: f64, pixel_pitch: f64, bins: usize) -> Result<GradientLUT> {
    if presses.is_empty() {
        return Err(Error::invalid("LUT calibration needs at least one image"));
    }
    if !(2..=256).contains(&bins) {
        return Err(Error::invalid(format!("LUT bins must be in 2..=256, got {bins}")));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in presses {
        for c in 0..3 {
            lo[c] = lo[c].min(p.image.channel(c).min());
            hi[c] = hi[c].max(p.image.channel(c).max());
        }
    }
    let mut lut = GradientLUT::uncalibrated(bins);
    lut.lo = lo;
    lut.hi = hi;
    let cells = bins * bins * bins;
    let mut sum = vec![(0.0, 0.0, 0usize); cells];
    let mut bg = ([0.0; 3], 0usize);
    for p in presses {
        let (rows, cols) = (p.image.height(), p.image.width());
        let (gx, gy) = sphere_gradients(rows, cols, pixel_pitch, radius, p.press, p.center);
        // pixels well outside the smoothed rim define the background colour
        let rim = contact_radius(radius, p.press) + 6.0 * pixel_pitch;
        for i in 0..rows {
            for j in 0..cols {
                let color = p.image.pixel(i, j);
                let c = lut.cell(color);
                sum[c].0 += gx.get(i, j);
                sum[c].1 += gy.get(i, j);
                sum[c].2 += 1;
                let r = ((i as f64 - p.center.0).powi(2) + (j as f64 - p.center.1).powi(2)).sqrt() * pixel_pitch;
                if r > rim {
                    for (acc, v) in bg.0.iter_mut().zip(color) {
                        *acc += v;
                    }
                    bg.1 += 1;
                }
            }
        }
    }
    for (c, (sx, sy, n)) in sum.iter().enumerate() {
        if *n > 0 {
            lut.gx[c] = sx / *n as f64;
            lut.gy[c] = sy / *n as f64;
            lut.filled[c] = true;
        }
    }
    if bg.1 > 0 {
        lut.background = bg.0.map(|v| v / bg.1 as f64);
    } else {
        log::warn!("LUT calibration images have no flat background region");
        lut.background = presses[0].image.pixel(0, 0);
    }
    infill(&mut lut);
    Ok(lut)
}

/// Multi-source breadth-first fill over the 26-neighbourhood.
fn infill(lut: &mut GradientLUT) {
    let b = lut.bins as isize;
    let mut assigned = lut.filled.clone();
    let mut queue: VecDeque<usize> = (0..assigned.len()).filter(|&c| assigned[c]).collect();
    while let Some(c) = queue.pop_front() {
        let (x, y, z) = ((c as isize) / (b * b), (c as isize / b) % b, c as isize % b);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let (nx, ny, nz) = (x + dx, y + dy, z + dz);
                    if nx < 0 || ny < 0 || nz < 0 || nx >= b || ny >= b || nz >= b {
                        continue;
                    }
                    let n = ((nx * b + ny) * b + nz) as usize;
                    if !assigned[n] {
                        assigned[n] = true;
                        lut.gx[n] = lut.gx[c];
                        lut.gy[n] = lut.gy[c];
                        queue.push_back(n);
                    }
                }
            }
        }
    }
}

/// Solves `lap z = div g` with Neumann borders by a DCT diagonalisation.
/// Slopes are per mm; the result is in mm with the median border value at 0.
pub fn integrate_depth(gx: &Mat, gy: &Mat, pixel_pitch: f64) -> Result<Mat> {
    gx.check_same_shape(gy, "integrate_depth")?;
    if !(pixel_pitch > 0.0) {
        return Err(Error::invalid("pixel pitch must be positive"));
    }
    let (rows, cols) = gx.shape();
    // fluxes on the staggered grid, zero across the outer border
    let mut div = Mat::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols.saturating_sub(1) {
            let f = 0.5 * (gx.get(i, j) + gx.get(i, j + 1)) * pixel_pitch;
            div.set(i, j, div.get(i, j) + f);
            div.set(i, j + 1, div.get(i, j + 1) - f);
        }
    }
    for i in 0..rows.saturating_sub(1) {
        for j in 0..cols {
            let f = 0.5 * (gy.get(i, j) + gy.get(i + 1, j)) * pixel_pitch;
            div.set(i, j, div.get(i, j) + f);
            div.set(i + 1, j, div.get(i + 1, j) - f);
        }
    }
    let dct = Dct2d::new(rows, cols)?;
    let spec = dct.forward(&div)?;
    let pi = std::f64::consts::PI;
    let solved = Mat::from_fn(rows, cols, |k, l| {
        if k == 0 && l == 0 {
            return 0.0;
        }
        let lambda = 2.0 * (pi * k as f64 / rows as f64).cos() - 2.0 + 2.0 * (pi * l as f64 / cols as f64).cos() - 2.0;
        spec.get(k, l) / lambda
    });
    let z = dct.inverse(&solved)?;
    let mut border: Vec<f64> = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .filter(|&(i, j)| i == 0 || j == 0 || i == rows - 1 || j == cols - 1)
        .map(|(i, j)| z.get(i, j))
        .collect();
    border.sort_by(|a, b| a.total_cmp(b));
    let n = border.len();
    let median = 0.5 * (border[(n - 1) / 2] + border[n / 2]);
    Ok(z.map(|v| v - median))
}

/// Per-pixel slopes from a tactile image after subtracting the reference
/// background and adding back the calibration background.
pub fn gradients_from_image(img: &ImageRGB, lut: &GradientLUT, ref_background: &ImageRGB) -> Result<(Mat, Mat, f64)> {
    if !lut.is_calibrated() {
        return Err(Error::InvalidState("gradient LUT has not been calibrated".into()));
    }
    if img.height() != ref_background.height() || img.width() != ref_background.width() {
        return Err(Error::invalid("image and reference background differ in size"));
    }
    let (rows, cols) = (img.height(), img.width());
    let mut gx = Mat::zeros(rows, cols);
    let mut gy = Mat::zeros(rows, cols);
    let mut hits = 0usize;
    let bg = lut.background();
    for i in 0..rows {
        for j in 0..cols {
            let p = img.pixel(i, j);
            let r = ref_background.pixel(i, j);
            let color = [p[0] - r[0] + bg[0], p[1] - r[1] + bg[1], p[2] - r[2] + bg[2]];
            let (x, y, filled) = lut.lookup(color);
            gx.set(i, j, x);
            gy.set(i, j, y);
            hits += filled as usize;
        }
    }
    Ok((gx, gy, hits as f64 / (rows * cols) as f64))
}

pub fn depth_from_image(
    img: &ImageRGB,
    lut: &GradientLUT,
    ref_background: &ImageRGB,
    pixel_pitch: f64,
) -> Result<DepthMap> {
    let (gx, gy, hit_rate) = gradients_from_image(img, lut, ref_background)?;
    if hit_rate < 0.5 {
        log::warn!(
            "only {:.0}% of pixels fell in calibrated LUT cells; depth relies on infill",
            hit_rate * 100.0
        );
    }
    let z = integrate_depth(&gx, &gy, pixel_pitch)?;
    DepthMap::new(z.map(|v| v.max(0.0)), pixel_pitch)
}

/// Tracked marker state relative to the first frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerField {
    /// Last known `(u, v)` = (column, row) position of each marker.
    pub positions: Vec<(f64, f64)>,
    /// Accumulated displacement since the reference frame.
    pub displacements: Vec<(f64, f64)>,
    /// Displacement added in the latest frame (zero for lost markers).
    pub last_step: Vec<(f64, f64)>,
    pub lost: Vec<bool>,
    /// Nominal marker pitch in pixels; matches farther than half of it are rejected.
    pub spacing: f64,
}

impl MarkerField {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,u,v,du,dv,lost\n");
        for i in 0..self.len() {
            let (u, v) = self.positions[i];
            let (du, dv) = self.displacements[i];
            out.push_str(&format!("{i},{u:.6},{v:.6},{du:.6},{dv:.6},{}\n", self.lost[i] as u8));
        }
        out
    }
}

/// Dark blobs: threshold halfway between the frame extremes, 4-connected
/// components, then centroids weighted by darkness over a window padded
/// around each component so partially covered edge pixels count.
pub fn detect_markers(frame: &Mat) -> Vec<(f64, f64)> {
    let (rows, cols) = frame.shape();
    let (lo, hi) = (frame.min(), frame.max());
    if !(hi - lo > 1e-9) {
        return Vec::new();
    }
    let thr = 0.5 * (lo + hi);
    let mut label = vec![usize::MAX; rows * cols];
    let mut out = Vec::new();
    for start in 0..rows * cols {
        if label[start] != usize::MAX || frame.as_slice()[start] >= thr {
            continue;
        }
        let id = out.len();
        let (mut i0, mut i1, mut j0, mut j1) = (rows, 0, cols, 0);
        let mut queue = VecDeque::from([start]);
        label[start] = id;
        while let Some(p) = queue.pop_front() {
            let (i, j) = (p / cols, p % cols);
            (i0, i1, j0, j1) = (i0.min(i), i1.max(i), j0.min(j), j1.max(j));
            let mut visit = |q: usize| {
                if label[q] == usize::MAX && frame.as_slice()[q] < thr {
                    label[q] = id;
                    queue.push_back(q);
                }
            };
            if i > 0 {
                visit(p - cols);
            }
            if i + 1 < rows {
                visit(p + cols);
            }
            if j > 0 {
                visit(p - 1);
            }
            if j + 1 < cols {
                visit(p + 1);
            }
        }
        let pad = 2;
        let (mut w, mut su, mut sv) = (0.0, 0.0, 0.0);
        for i in i0.saturating_sub(pad)..=(i1 + pad).min(rows - 1) {
            for j in j0.saturating_sub(pad)..=(j1 + pad).min(cols - 1) {
                let l = label[i * cols + j];
                if l != usize::MAX && l != id {
                    continue;
                }
                let d = hi - frame.get(i, j);
                w += d;
                su += d * j as f64;
                sv += d * i as f64;
            }
        }
        out.push((su / w, sv / w));
    }
    out
}

fn median_nn_distance(points: &[(f64, f64)]) -> f64 {
    let mut d: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(a, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(b, _)| *b != a)
                .map(|(_, q)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    d.sort_by(|a, b| a.total_cmp(b));
    d.get(d.len() / 2).copied().unwrap_or(f64::INFINITY)
}

/// Detects markers in `frame` and matches them to `state` (or starts a new
/// field when `state` is `None`). Matching is greedy global nearest-neighbour
/// within half the marker spacing; a previously lost marker can be
/// re-acquired near its last known position.
pub fn track_markers(frame: &Mat, state: Option<&MarkerField>) -> MarkerField {
    let detections = detect_markers(frame);
    let Some(prev) = state.filter(|s| !s.is_empty()) else {
        let n = detections.len();
        return MarkerField {
            spacing: median_nn_distance(&detections),
            positions: detections,
            displacements: vec![(0.0, 0.0); n],
            last_step: vec![(0.0, 0.0); n],
            lost: vec![false; n],
        };
    };
    let limit = 0.5 * prev.spacing;
    let mut pairs = Vec::new();
    for (m, p) in prev.positions.iter().enumerate() {
        for (d, q) in detections.iter().enumerate() {
            let dist = ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
            if dist <= limit {
                pairs.push((dist, m, d));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut next = prev.clone();
    next.lost = vec![true; prev.len()];
    next.last_step = vec![(0.0, 0.0); prev.len()];
    let mut used = vec![false; detections.len()];
    for (_, m, d) in pairs {
        if !next.lost[m] || used[d] {
            continue;
        }
        used[d] = true;
        next.lost[m] = false;
        let step = (
            detections[d].0 - prev.positions[m].0,
            detections[d].1 - prev.positions[m].1,
        );
        next.last_step[m] = step;
        next.displacements[m] = (prev.displacements[m].0 + step.0, prev.displacements[m].1 + step.1);
        next.positions[m] = detections[d];
    }
    next
}

/// Dark discs of `radius` px on a light background, anti-aliased by 8x8
/// supersampling. Positions are `(u, v)` = (column, row).
pub fn render_markers(rows: usize, cols: usize, positions: &[(f64, f64)], radius: f64) -> Mat {
    const SS: usize = 8;
    let (bg, ink) = (0.9, 0.1);
    let mut m = Mat::filled(rows, cols, bg);
    for &(u, v) in positions {
        let i0 = (v - radius - 1.0).floor().max(0.0) as usize;
        let i1 = ((v + radius + 1.0).ceil() as usize).min(rows.saturating_sub(1));
        let j0 = (u - radius - 1.0).floor().max(0.0) as usize;
        let j1 = ((u + radius + 1.0).ceil() as usize).min(cols.saturating_sub(1));
        for i in i0..=i1 {
            for j in j0..=j1 {
                let mut inside = 0;
                for a in 0..SS {
                    for b in 0..SS {
                        let y = i as f64 - 0.5 + (a as f64 + 0.5) / SS as f64;
                        let x = j as f64 - 0.5 + (b as f64 + 0.5) / SS as f64;
                        if (x - u).powi(2) + (y - v).powi(2) <= radius * radius {
                            inside += 1;
                        }
                    }
                }
                let cover = inside as f64 / (SS * SS) as f64;
                let cur = m.get(i, j);
                m.set(i, j, cur - cover * (bg - ink));
            }
        }
    }
    m
}

/// Regular grid of `n x n` marker positions with the given pitch and origin.
pub fn marker_grid(n: usize, spacing: f64, origin: (f64, f64)) -> Vec<(f64, f64)> {
    (0..n)
        .flat_map(|r| (0..n).map(move |c| (origin.0 + c as f64 * spacing, origin.1 + r as f64 * spacing)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const PITCH: f64 = 0.04;

    fn centre(n: usize) -> (f64, f64) {
        ((n as f64 - 1.0) / 2.0, (n as f64 - 1.0) / 2.0)
    }

    #[test]
    fn flat_depth_renders_uniform_background() {
        let img = simulate_tactile_image(&DepthMap::flat(20, 30, PITCH).unwrap(), &LightingConfig::default()).unwrap();
        let expect = LightingConfig::default().shade(0.0, 0.0);
        for (c, e) in expect.iter().enumerate() {
            assert!(img.channel(c).as_slice().iter().all(|&v| (v - e).abs() < 1e-15));
        }
    }

    #[test]
    fn sphere_cap_geometry() {
        assert!((contact_radius(4.0, 1.0) - 7f64.sqrt()).abs() < 1e-12);
        let d = DepthMap::sphere(201, 201, PITCH, 4.0, 1.0, centre(201)).unwrap();
        assert!((d.grid().max() - 1.0).abs() < 1e-12);
        // contact disc area in pixels matches pi a^2
        let n = d.grid().as_slice().iter().filter(|&&v| v > 0.0).count() as f64;
        let expect = std::f64::consts::PI * 7.0 / (PITCH * PITCH);
        assert!((n - expect).abs() / expect < 0.01, "{n} vs {expect}");
        assert!(DepthMap::new(Mat::filled(2, 2, -0.1), PITCH).is_err());
    }

    #[test]
    fn sphere_gradients_match_finite_differences() {
        let c = (50.3, 49.6);
        let d = DepthMap::sphere(100, 100, PITCH, 4.0, 1.0, c).unwrap();
        let (fx, fy) = d.gradients();
        let (ax, ay) = sphere_gradients(100, 100, PITCH, 4.0, 1.0, c);
        for (i, j) in [(50, 50), (40, 55), (60, 30), (45, 70)] {
            assert!((fx.get(i, j) - ax.get(i, j)).abs() < 5e-3);
            assert!((fy.get(i, j) - ay.get(i, j)).abs() < 5e-3);
        }
    }

    #[test]
    fn lights_rotate_with_the_gradient() {
        let cfg = LightingConfig::default();
        let rot = |(x, y): (f64, f64)| {
            let (s, c) = (120f64.to_radians().sin(), 120f64.to_radians().cos());
            (c * x - s * y, s * x + c * y)
        };
        for g in [(0.3, -0.2), (0.8, 0.1), (-0.5, -0.5)] {
            let a = cfg.shade(g.0, g.1);
            let r = rot(g);
            let b = cfg.shade(r.0, r.1);
            // rotating the surface by +120 degrees carries light c onto light c+1
            for c in 0..3 {
                assert!((a[c] - b[(c + 1) % 3]).abs() < 1e-12);
            }
        }
        let img =
            simulate_tactile_image(&DepthMap::sphere(80, 80, PITCH, 3.0, 0.8, centre(80)).unwrap(), &cfg).unwrap();
        assert!(img.channel(0).max_abs_diff(img.channel(1)).unwrap() > 0.05);
    }

    #[test]
    fn specular_only_brightens() {
        let plain = LightingConfig::default();
        let shiny = LightingConfig {
            specular: Some((0.3, 8.0)),
            ..Default::default()
        };
        for g in [(0.0, 0.0), (0.4, 0.2)] {
            let (a, b) = (plain.shade(g.0, g.1), shiny.shade(g.0, g.1));
            assert!((0..3).all(|c| b[c] >= a[c]));
        }
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let m = Mat::filled(9, 7, 0.3);
        assert!(gaussian_blur(&m, 1.5).max_abs_diff(&m).unwrap() < 1e-12);
        let mut spike = Mat::zeros(31, 31);
        spike.set(15, 15, 1.0);
        let b = gaussian_blur(&spike, 1.5);
        assert!((b.sum() - 1.0).abs() < 1e-12);
        assert!(b.get(15, 15) < 0.1);
    }

    fn paraboloid(n: usize, r: f64) -> (Mat, Mat, Mat) {
        let c = (n as f64 - 1.0) / 2.0;
        let z = Mat::from_fn(n, n, |i, j| {
            let (x, y) = (j as f64 - c, i as f64 - c);
            (1.0 - (x * x + y * y) / (r * r)).max(0.0)
        });
        let g = |i: usize, j: usize, along_x: bool| {
            let (x, y) = (j as f64 - c, i as f64 - c);
            if x * x + y * y >= r * r {
                0.0
            } else if along_x {
                -2.0 * x / (r * r)
            } else {
                -2.0 * y / (r * r)
            }
        };
        (
            z,
            Mat::from_fn(n, n, |i, j| g(i, j, true)),
            Mat::from_fn(n, n, |i, j| g(i, j, false)),
        )
    }

    #[test]
    fn integrates_paraboloid() {
        let (z, gx, gy) = paraboloid(128, 40.0);
        let rec = integrate_depth(&gx, &gy, 1.0).unwrap();
        let offset = rec.sub(&z).unwrap().mean();
        let err = rec.map(|v| v - offset).sub(&z).unwrap();
        let rmse = (err.as_slice().iter().map(|e| e * e).sum::<f64>() / err.as_slice().len() as f64).sqrt();
        assert!(rmse <= 0.01 * z.max(), "rmse {rmse}");
    }

    #[test]
    fn integration_is_linear_and_flat_is_zero() {
        let zero = Mat::zeros(16, 12);
        assert_eq!(integrate_depth(&zero, &zero, 0.1).unwrap().max_abs(), 0.0);
        let (_, gx, gy) = paraboloid(32, 10.0);
        let a = integrate_depth(&gx, &gy, 0.5).unwrap();
        let b = integrate_depth(&gx.scale(-2.5), &gy.scale(-2.5), 0.5).unwrap();
        assert!(b.max_abs_diff(&a.scale(-2.5)).unwrap() < 1e-9);
        assert!(integrate_depth(&zero, &Mat::zeros(16, 11), 0.1).is_err());
    }

    fn calibrated(bins: usize) -> (GradientLUT, LightingConfig) {
        let cfg = LightingConfig::default();
        let presses: Vec<SpherePress> = [0.5, 1.0, 1.5]
            .iter()
            .map(|&h| SpherePress {
                image: simulate_tactile_image(&DepthMap::sphere(200, 200, PITCH, 3.0, h, centre(200)).unwrap(), &cfg)
                    .unwrap(),
                press: h,
                center: centre(200),
            })
            .collect();
        (calibrate_lut(&presses, 3.0, PITCH, bins).unwrap(), cfg)
    }

    #[test]
    fn lut_background_and_self_consistency() {
        let (lut, cfg) = calibrated(32);
        let (gx, gy, filled) = lut.lookup(cfg.shade(0.0, 0.0));
        assert!(filled && gx.abs() < 0.02 && gy.abs() < 0.02);
        let (gx, gy, _) = lut.lookup(cfg.shade(0.4, -0.3));
        assert!((gx - 0.4).abs() < 0.1 && (gy + 0.3).abs() < 0.1, "{gx} {gy}");
        assert!(!GradientLUT::uncalibrated(8).is_calibrated());
        assert!(lut.coverage() > 0.0);
    }

    #[test]
    fn held_out_sphere_gradients() {
        let (lut, cfg) = calibrated(32);
        let c = (101.0, 98.0);
        let d = DepthMap::sphere(200, 200, PITCH, 4.0, 0.8, c).unwrap();
        let img = simulate_tactile_image(&d, &cfg).unwrap();
        let bg = simulate_tactile_image(&DepthMap::flat(200, 200, PITCH).unwrap(), &cfg).unwrap();
        let (gx, gy, _) = gradients_from_image(&img, &lut, &bg).unwrap();
        let (ax, ay) = sphere_gradients(200, 200, PITCH, 4.0, 0.8, c);
        let mask = d.contact_mask(CONTACT_THRESHOLD_MM);
        let mut se = 0.0;
        let mut n = 0.0;
        for (k, &inside) in mask.iter().enumerate() {
            if inside {
                se += (gx.as_slice()[k] - ax.as_slice()[k]).powi(2) + (gy.as_slice()[k] - ay.as_slice()[k]).powi(2);
                n += 1.0;
            }
        }
        let rmse = (se / n).sqrt();
        assert!(rmse <= 0.05, "gradient rmse {rmse}");
    }

    #[test]
    fn depth_from_background_and_uncalibrated() {
        let (lut, cfg) = calibrated(32);
        let bg = simulate_tactile_image(&DepthMap::flat(64, 64, PITCH).unwrap(), &cfg).unwrap();
        let d = depth_from_image(&bg, &lut, &bg, PITCH).unwrap();
        assert!(d.grid().max_abs() <= 0.02);
        let err = depth_from_image(&bg, &GradientLUT::uncalibrated(8), &bg, PITCH).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)));
    }

    #[test]
    fn sphere_depth_round_trip() {
        let (lut, cfg) = calibrated(32);
        let c = (99.0, 102.0);
        let truth = DepthMap::sphere(200, 200, PITCH, 4.0, 0.5, c).unwrap();
        let img = simulate_tactile_image(&truth, &cfg).unwrap();
        let bg = simulate_tactile_image(&DepthMap::flat(200, 200, PITCH).unwrap(), &cfg).unwrap();
        let rec = depth_from_image(&img, &lut, &bg, PITCH).unwrap();
        let mask = truth.contact_mask(CONTACT_THRESHOLD_MM);
        let (mut se, mut n) = (0.0, 0.0);
        for (k, &inside) in mask.iter().enumerate() {
            if inside {
                se += (rec.grid().as_slice()[k] - truth.grid().as_slice()[k]).powi(2);
                n += 1.0;
            }
        }
        let rmse = (se / n).sqrt();
        assert!(rmse <= 0.05, "depth rmse {rmse}");
        let (mut w, mut si, mut sj) = (0.0, 0.0, 0.0);
        for (k, &v) in rec.grid().as_slice().iter().enumerate() {
            w += v;
            si += v * (k / 200) as f64;
            sj += v * (k % 200) as f64;
        }
        let (pi, pj) = (si / w, sj / w);
        assert!(
            ((pi - c.0).powi(2) + (pj - c.1).powi(2)).sqrt() <= 1.0,
            "centroid {pi} {pj}"
        );
    }

    #[test]
    fn static_grid_has_no_motion() {
        let pos = marker_grid(6, 12.0, (10.0, 10.0));
        let frame = render_markers(90, 90, &pos, 3.0);
        let mut field = track_markers(&frame, None);
        assert_eq!(field.len(), 36);
        assert!((field.spacing - 12.0).abs() < 0.1);
        for _ in 0..10 {
            field = track_markers(&frame, Some(&field));
        }
        assert!(field
            .displacements
            .iter()
            .all(|d| d.0.abs() <= 0.05 && d.1.abs() <= 0.05));
        assert!(field.lost.iter().all(|l| !l));
    }

    #[test]
    fn rigid_translation() {
        let pos = marker_grid(8, 12.0, (12.0, 12.0));
        let shifted: Vec<(f64, f64)> = pos.iter().map(|p| (p.0 + 3.2, p.1 - 1.7)).collect();
        let f0 = track_markers(&render_markers(110, 110, &pos, 3.0), None);
        let f1 = track_markers(&render_markers(110, 110, &shifted, 3.0), Some(&f0));
        let n = f1.len() as f64;
        let du = f1.displacements.iter().map(|d| d.0).sum::<f64>() / n;
        let dv = f1.displacements.iter().map(|d| d.1).sum::<f64>() / n;
        assert!((du - 3.2).abs() < 0.1 && (dv + 1.7).abs() < 0.1, "{du} {dv}");
    }

    #[test]
    fn occluded_marker_is_lost_then_reacquired() {
        let pos = marker_grid(5, 14.0, (10.0, 10.0));
        let f0 = track_markers(&render_markers(80, 80, &pos, 3.0), None);
        let mut missing = pos.clone();
        missing.remove(7);
        let f1 = track_markers(&render_markers(80, 80, &missing, 3.0), Some(&f0));
        assert_eq!(f1.lost.iter().filter(|&&l| l).count(), 1);
        let f2 = track_markers(&render_markers(80, 80, &pos, 3.0), Some(&f1));
        assert!(f2.lost.iter().all(|l| !l));
        assert!(f2.to_csv().lines().count() == 26);
        assert!(track_markers(&Mat::filled(10, 10, 0.9), None).is_empty());
    }

    #[test]
    fn cascade_identity() {
        let base = marker_grid(6, 12.0, (12.0, 12.0));
        let mut field = track_markers(&render_markers(96, 96, &base, 3.0), None);
        let mut sums = vec![(0.0f64, 0.0f64); field.len()];
        for t in 1..20 {
            let s = t as f64 * 0.37;
            let pos: Vec<(f64, f64)> = base.iter().map(|p| (p.0 + s, p.1 + 0.5 * s.sin())).collect();
            field = track_markers(&render_markers(96, 96, &pos, 3.0), Some(&field));
            for (acc, step) in sums.iter_mut().zip(&field.last_step) {
                acc.0 += step.0;
                acc.1 += step.1;
            }
        }
        assert_eq!(sums, field.displacements);
    }
}
