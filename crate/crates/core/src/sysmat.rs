//! Close-up system matrices synthesised directly from a mask vector, and the
//! two-term separable forward model `Y = Po X Qo^T + Pc X Qc^T + noise`.
//!
//! Each matrix maps one scene axis (N scene rows, or M scene columns) onto the
//! matching measurement axis (R or S sensor rows). For scene index `j` and
//! sensor index `r` a pinhole ray crosses the mask at
//!
//! ```text
//! u = (d * y_scene(j) + z * y_sensor(r)) / (z + d)
//! ```
//!
//! so the coding matrix samples the mask profile along an affine map of
//! `(r, j)`. Lines of constant `u` are the stripes (slope `k_stripe` in index
//! units) and the point directly below the scene pixel traces the centre line
//! (slope `k_c`). A sigmoid envelope around the centre line models the limited
//! angular response of each sensor pixel, fading the band to zero.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::mask::MaskVector;
use crate::mat::{sandwich, Mat};
use crate::rng;

pub const DEFAULT_NOISE_SIGMA: f64 = 0.005;
pub const DEFAULT_FADE_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Measurement pixel pitch, µm.
    pub delta_sensor: f64,
    /// Scene pixel pitch, µm.
    pub delta_scene: f64,
    /// Mask feature size, µm.
    pub delta_mask: f64,
    /// Scene-to-mask distance, mm.
    pub z: f64,
    /// Mask-to-sensor distance, mm.
    pub d: f64,
    pub meas_rows: usize,
    pub meas_cols: usize,
    pub scene_rows: usize,
    pub scene_cols: usize,
    /// Stripe band width in sensor rows; derived from the mask extent when absent.
    #[serde(default)]
    pub d_stripe: Option<usize>,
    /// 90%-to-10% fade width of the band edge as a fraction of `d_stripe`.
    #[serde(default = "default_fade")]
    pub fade_fraction: f64,
}

fn default_fade() -> f64 {
    DEFAULT_FADE_FRACTION
}

impl Geometry {
    /// The full-size sensor: 1280x1024 measurement, 512x400 scene.
    pub fn table_one() -> Self {
        Geometry {
            delta_sensor: 10.0,
            delta_scene: 31.5,
            delta_mask: 20.0,
            z: 4.8,
            d: 1.0,
            meas_rows: 1024,
            meas_cols: 1280,
            scene_rows: 400,
            scene_cols: 512,
            d_stripe: None,
            fade_fraction: DEFAULT_FADE_FRACTION,
        }
    }

    /// A scaled-down sensor with the same optics for tests and experiments.
    ///
    /// The scene pitch is chosen so the scene's centre lines span the sensor.
    pub fn desk(scene: usize, meas: usize) -> Self {
        Geometry {
            delta_sensor: 10.0,
            delta_scene: 10.0 * meas as f64 / scene as f64,
            delta_mask: 20.0,
            z: 4.8,
            d: 1.0,
            meas_rows: meas,
            meas_cols: meas,
            scene_rows: scene,
            scene_cols: scene,
            d_stripe: None,
            fade_fraction: DEFAULT_FADE_FRACTION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta_sensor", self.delta_sensor),
            ("delta_scene", self.delta_scene),
            ("delta_mask", self.delta_mask),
            ("z", self.z),
            ("d", self.d),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Geometry(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("meas_rows", self.meas_rows),
            ("meas_cols", self.meas_cols),
            ("scene_rows", self.scene_rows),
            ("scene_cols", self.scene_cols),
        ] {
            if v < 8 {
                return Err(Error::Geometry(format!("{name} must be at least 8, got {v}")));
            }
        }
        if !(self.fade_fraction > 0.0 && self.fade_fraction < 1.0) {
            return Err(Error::Geometry(format!(
                "fade_fraction must lie in (0, 1), got {}",
                self.fade_fraction
            )));
        }
        if self.d_stripe == Some(0) {
            return Err(Error::Geometry("d_stripe must be at least 1".into()));
        }
        Ok(())
    }

    /// Band width implied by projecting the mask extent through the pinhole.
    pub fn default_d_stripe(&self, mask_len: usize) -> usize {
        let rows = mask_len as f64 * self.delta_mask * self.d / (self.z + self.d) / self.delta_sensor;
        (rows.ceil() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripeParams {
    /// Slope of the band centre line, sensor rows per scene row.
    pub k_c: f64,
    /// Slope of the individual stripes.
    pub k_stripe: f64,
    /// Band width in sensor rows.
    pub d_stripe: usize,
    /// Mask length traversed along the centre line, mm.
    pub l_mask: f64,
}

/// Stripe parameters for the row operators (`Po`, `Pc`).
pub fn stripe_params(g: &Geometry, mask_len: usize) -> StripeParams {
    stripe_params_axis(g, mask_len, g.meas_rows)
}

fn stripe_params_axis(g: &Geometry, mask_len: usize, meas: usize) -> StripeParams {
    StripeParams {
        k_c: g.delta_scene / g.delta_sensor,
        k_stripe: -g.d * g.delta_scene / (g.z * g.delta_sensor),
        d_stripe: g.d_stripe.unwrap_or_else(|| g.default_d_stripe(mask_len)),
        l_mask: meas as f64 * g.delta_sensor / 1000.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemMatrices {
    pub po: Mat,
    pub qo: Mat,
    pub pc: Mat,
    pub qc: Mat,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    geometry: Option<Geometry>,
    stripe_params: Option<StripeParams>,
    scene_rows: usize,
    scene_cols: usize,
    meas_rows: usize,
    meas_cols: usize,
}

impl SystemMatrices {
    pub fn new(po: Mat, qo: Mat, pc: Mat, qc: Mat) -> Result<Self> {
        if po.shape() != pc.shape() || qo.shape() != qc.shape() {
            return Err(Error::invalid(format!(
                "P matrices {:?}/{:?} and Q matrices {:?}/{:?} must pair up",
                po.shape(),
                pc.shape(),
                qo.shape(),
                qc.shape()
            )));
        }
        Ok(SystemMatrices { po, qo, pc, qc })
    }

    /// `(N, M)`
    pub fn scene_shape(&self) -> (usize, usize) {
        (self.po.cols(), self.qo.cols())
    }

    /// `(R, S)`
    pub fn meas_shape(&self) -> (usize, usize) {
        (self.po.rows(), self.qo.rows())
    }

    /// Saves `po.ltm`, `qo.ltm`, `pc.ltm`, `qc.ltm` and a `sysmat.json` sidecar.
    pub fn save(
        &self,
        dir: impl AsRef<Path>,
        geometry: Option<&Geometry>,
        stripe: Option<&StripeParams>,
    ) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (name, m) in self.named() {
            io::save_mat(dir.join(format!("{name}.ltm")), m)?;
        }
        let (n, m) = self.scene_shape();
        let (r, s) = self.meas_shape();
        io::save_json(
            dir.join("sysmat.json"),
            &Sidecar {
                geometry: geometry.cloned(),
                stripe_params: stripe.cloned(),
                scene_rows: n,
                scene_cols: m,
                meas_rows: r,
                meas_cols: s,
            },
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let load = |name: &str| io::load_mat(dir.join(format!("{name}.ltm")));
        SystemMatrices::new(load("po")?, load("qo")?, load("pc")?, load("qc")?)
    }

    pub fn load_geometry(dir: impl AsRef<Path>) -> Result<Option<Geometry>> {
        let side: Sidecar = io::load_json(dir.as_ref().join("sysmat.json"))?;
        Ok(side.geometry)
    }

    pub fn named(&self) -> [(&'static str, &Mat); 4] {
        [("po", &self.po), ("qo", &self.qo), ("pc", &self.pc), ("qc", &self.qc)]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Builds the open and coding matrices for one axis.
fn axis_matrices(phi: &[f64], g: &Geometry, meas: usize, scene: usize, sp: &StripeParams) -> Result<(Mat, Mat)> {
    let k = phi.len();
    let width = sp.d_stripe as f64;
    if sp.d_stripe > meas {
        return Err(Error::Geometry(format!(
            "stripe band of {} rows exceeds the {meas}-row measurement",
            sp.d_stripe
        )));
    }
    let half_meas = (meas as f64 - 1.0) / 2.0;
    let half_scene = (scene as f64 - 1.0) / 2.0;
    let fade = g.fade_fraction * width;
    // 10%..90% of the logistic spans 2 ln 9 scale units; 10% sits at the band edge.
    let scale = fade / (2.0 * 9f64.ln());
    let centre = width / 2.0 - fade / 2.0;
    let zd = g.z + g.d;

    let mut open = Mat::zeros(meas, scene);
    let mut coding = Mat::zeros(meas, scene);
    for r in 0..meas {
        let y_sensor = (r as f64 - half_meas) * g.delta_sensor;
        for j in 0..scene {
            let y_scene = (j as f64 - half_scene) * g.delta_scene;
            let line = half_meas + (j as f64 - half_scene) * sp.k_c;
            let env = sigmoid((centre - (r as f64 - line).abs()) / scale);
            let u = (g.d * y_scene + g.z * y_sensor) / zd;
            let t = u / g.delta_mask + k as f64 / 2.0 - 0.5;
            let profile = interp_clamped(phi, t);
            open.set(r, j, 0.5 * env);
            coding.set(r, j, 0.5 * env * profile);
        }
    }
    Ok((open, coding))
}

/// Linear interpolation of a sampled profile with edge extension.
fn interp_clamped(v: &[f64], t: f64) -> f64 {
    let last = v.len() - 1;
    if t <= 0.0 {
        return v[0];
    }
    if t >= last as f64 {
        return v[last];
    }
    let i = t.floor() as usize;
    let f = t - i as f64;
    v[i] + f * (v[i + 1] - v[i])
}

pub fn generate_system_matrices(phi: &MaskVector, g: &Geometry) -> Result<SystemMatrices> {
    g.validate()?;
    let k = phi.len();
    let extent = k as f64 * g.delta_mask;
    for meas in [g.meas_rows, g.meas_cols] {
        let l_mask = meas as f64 * g.delta_sensor;
        if l_mask > extent {
            return Err(Error::Geometry(format!(
                "effective mask length {:.3} mm exceeds the {k}-feature mask extent {:.3} mm",
                l_mask / 1000.0,
                extent / 1000.0
            )));
        }
    }
    let f = phi.to_f64();
    let sp_p = stripe_params_axis(g, k, g.meas_rows);
    let sp_q = stripe_params_axis(g, k, g.meas_cols);
    let (po, pc) = axis_matrices(&f, g, g.meas_rows, g.scene_rows, &sp_p)?;
    let (qo, qc) = axis_matrices(&f, g, g.meas_cols, g.scene_cols, &sp_q)?;
    SystemMatrices::new(po, qo, pc, qc)
}

/// Which terms of the model to render.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Terms {
    /// `Po X Qo^T + Pc X Qc^T`
    Full,
    /// `Pc X Qc^T` only.
    CodingOnly,
    /// `Po X Qo^T` only.
    OpenOnly,
}

pub fn forward(sm: &SystemMatrices, x: &Mat, noise_sigma: f64, seed: u64) -> Result<Mat> {
    forward_terms(sm, x, noise_sigma, seed, Terms::Full)
}

pub fn forward_terms(sm: &SystemMatrices, x: &Mat, noise_sigma: f64, seed: u64, terms: Terms) -> Result<Mat> {
    if x.shape() != sm.scene_shape() {
        return Err(Error::invalid(format!(
            "scene is {}x{}, system expects {}x{}",
            x.rows(),
            x.cols(),
            sm.scene_shape().0,
            sm.scene_shape().1
        )));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let mut y = match terms {
        Terms::Full => {
            let mut y = sandwich(&sm.po, x, &sm.qo)?;
            y.axpy(1.0, &sandwich(&sm.pc, x, &sm.qc)?)?;
            y
        }
        Terms::CodingOnly => sandwich(&sm.pc, x, &sm.qc)?,
        Terms::OpenOnly => sandwich(&sm.po, x, &sm.qo)?,
    };
    if noise_sigma > 0.0 {
        add_noise(&mut y, noise_sigma, seed, "noise");
    }
    Ok(y)
}

pub(crate) fn add_noise(y: &mut Mat, sigma: f64, seed: u64, tag: &str) {
    let mut r = rng::stream(seed, tag);
    let normal = Normal::new(0.0, sigma).expect("sigma checked positive");
    for v in y.as_mut_slice() {
        *v += normal.sample(&mut r);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{mls_vector, random_vector};

    #[test]
    fn table_one_stripe_params() {
        let g = Geometry::table_one();
        let sp = stripe_params(&g, 770);
        assert!((sp.k_c - 3.15).abs() < 1e-12);
        assert!((sp.k_stripe + 0.65625).abs() < 1e-12);
        assert!((sp.l_mask - 10.24).abs() < 1e-12);
        assert_eq!(sp.d_stripe, 266);
    }

    #[test]
    fn all_open_gene_gives_equal_terms() {
        let g = Geometry::desk(16, 32);
        let phi = MaskVector::new(vec![1; 64]).unwrap();
        let sm = generate_system_matrices(&phi, &g).unwrap();
        assert_eq!(sm.pc, sm.po);
        assert_eq!(sm.qc, sm.qo);
    }

    #[test]
    fn open_terms_ignore_sign_and_coding_flips() {
        let g = Geometry::desk(16, 32);
        let phi = random_vector(64, 3).unwrap();
        let a = generate_system_matrices(&phi, &g).unwrap();
        let b = generate_system_matrices(&phi.negated(), &g).unwrap();
        assert_eq!(a.po, b.po);
        assert_eq!(a.qo, b.qo);
        assert_eq!(a.pc, b.pc.scale(-1.0));
        assert!(a.po.min() >= 0.0 && a.qo.min() >= 0.0);
        // deterministic
        assert_eq!(a, generate_system_matrices(&phi, &g).unwrap());
    }

    #[test]
    fn geometry_errors() {
        let mut g = Geometry::desk(16, 32);
        assert!(matches!(
            generate_system_matrices(&random_vector(8, 1).unwrap(), &g),
            Err(Error::Geometry(_))
        ));
        g.d_stripe = Some(40);
        assert!(matches!(
            generate_system_matrices(&random_vector(64, 1).unwrap(), &g),
            Err(Error::Geometry(_))
        ));
        let mut g = Geometry::desk(16, 32);
        g.z = 0.0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn table_one_open_column_sums_are_flat_in_the_centre() {
        let g = Geometry::table_one();
        let sm = generate_system_matrices(&mls_vector(8, 3).unwrap(), &g).unwrap();
        let sums = sm.po.col_sums();
        let n = sums.len();
        let centre = &sums[n / 4..3 * n / 4];
        let hi = centre.iter().copied().fold(f64::MIN, f64::max);
        let lo = centre.iter().copied().fold(f64::MAX, f64::min);
        assert!(lo > 0.0);
        assert!((hi - lo) / hi < 0.05, "spread {}", (hi - lo) / hi);
    }

    /// Amplitude of |v| over one projected mask feature (about 2.4 sensor
    /// rows here), so zero crossings of the ±1 pattern do not punch holes.
    fn local_amplitude(v: &[f64]) -> Vec<f64> {
        (0..v.len())
            .map(|i| {
                let lo = i.saturating_sub(1);
                let hi = (i + 2).min(v.len());
                v[lo..hi].iter().fold(0.0f64, |m, x| m.max(x.abs()))
            })
            .collect()
    }

    #[test]
    fn coding_columns_have_band_width_support() {
        let g = Geometry::table_one();
        let phi = random_vector(770, 11).unwrap();
        let sm = generate_system_matrices(&phi, &g).unwrap();
        let d = stripe_params(&g, 770).d_stripe as i64;
        let n = sm.pc.cols();
        for j in n / 4..3 * n / 4 {
            let col = sm.pc.col(j);
            let peak = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let amp = local_amplitude(&col);
            let idx: Vec<usize> = (0..amp.len()).filter(|&i| amp[i] >= 0.1 * peak).collect();
            let support = (idx.last().unwrap() - idx.first().unwrap() + 1) as i64;
            assert!((support - d).abs() <= 2, "column {j}: support {support} vs {d}");
        }
    }

    fn naive_forward(sm: &SystemMatrices, x: &Mat) -> Mat {
        let (r, s) = sm.meas_shape();
        let (n, m) = sm.scene_shape();
        Mat::from_fn(r, s, |a, b| {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..m {
                    acc += x.get(i, j) * (sm.po.get(a, i) * sm.qo.get(b, j) + sm.pc.get(a, i) * sm.qc.get(b, j));
                }
            }
            acc
        })
    }

    fn toy_system() -> SystemMatrices {
        let f = |s: u64| {
            let mut st = s;
            move |_: usize, _: usize| {
                st = st.wrapping_mul(6364136223846793005).wrapping_add(1);
                (st >> 40) as f64 / (1u64 << 24) as f64 - 0.5
            }
        };
        SystemMatrices::new(
            Mat::from_fn(8, 8, f(1)).map(f64::abs),
            Mat::from_fn(8, 8, f(2)).map(f64::abs),
            Mat::from_fn(8, 8, f(3)),
            Mat::from_fn(8, 8, f(4)),
        )
        .unwrap()
    }

    #[test]
    fn forward_matches_quadruple_loop() {
        let sm = toy_system();
        let x = Mat::from_fn(8, 8, |i, j| ((i * 3 + j * 5) % 7) as f64 / 7.0);
        let y = forward(&sm, &x, 0.0, 0).unwrap();
        assert!(y.max_abs_diff(&naive_forward(&sm, &x)).unwrap() <= 1e-9);
    }

    #[test]
    fn forward_is_linear_and_noise_is_seeded() {
        let sm = toy_system();
        let x1 = Mat::from_fn(8, 8, |i, j| (i + j) as f64 / 14.0);
        let x2 = Mat::from_fn(8, 8, |i, j| ((i * j) % 5) as f64 / 5.0);
        let sum = forward(&sm, &x1.add(&x2).unwrap(), 0.0, 0).unwrap();
        let parts = forward(&sm, &x1, 0.0, 0)
            .unwrap()
            .add(&forward(&sm, &x2, 0.0, 0).unwrap())
            .unwrap();
        assert!(sum.max_abs_diff(&parts).unwrap() <= 1e-9);

        let zero = Mat::zeros(8, 8);
        assert_eq!(forward(&sm, &zero, 0.0, 0).unwrap(), Mat::zeros(8, 8));
        let n1 = forward(&sm, &zero, 0.01, 5).unwrap();
        assert_eq!(n1, forward(&sm, &zero, 0.01, 5).unwrap());
        assert_ne!(n1, forward(&sm, &zero, 0.01, 6).unwrap());
        assert!(n1.max_abs() > 0.0);
        assert!(forward(&sm, &Mat::zeros(8, 9), 0.0, 0).is_err());
        assert!(forward(&sm, &zero, -1.0, 0).is_err());
    }

    #[test]
    fn coding_only_variant() {
        let sm = toy_system();
        let x = Mat::filled(8, 8, 0.5);
        let full = forward(&sm, &x, 0.0, 0).unwrap();
        let c = forward_terms(&sm, &x, 0.0, 0, Terms::CodingOnly).unwrap();
        let o = forward_terms(&sm, &x, 0.0, 0, Terms::OpenOnly).unwrap();
        assert!(full.max_abs_diff(&c.add(&o).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn rescaling_pairs_leaves_forward_unchanged() {
        let sm = toy_system();
        let (alpha, beta) = (4.0, 0.5);
        let scaled = SystemMatrices::new(
            sm.po.scale(alpha),
            sm.qo.scale(1.0 / alpha),
            sm.pc.scale(beta),
            sm.qc.scale(1.0 / beta),
        )
        .unwrap();
        let x = Mat::from_fn(8, 8, |i, j| (i as f64 - j as f64).abs() / 8.0);
        // powers of two keep the rescaling exact
        assert_eq!(forward(&sm, &x, 0.0, 0).unwrap(), forward(&scaled, &x, 0.0, 0).unwrap());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::desk(16, 32);
        let phi = random_vector(64, 3).unwrap();
        let sm = generate_system_matrices(&phi, &g).unwrap();
        sm.save(dir.path(), Some(&g), Some(&stripe_params(&g, 64))).unwrap();
        let back = SystemMatrices::load(dir.path()).unwrap();
        assert!(back.pc.max_abs_diff(&sm.pc).unwrap() < 1e-7);
        assert_eq!(SystemMatrices::load_geometry(dir.path()).unwrap(), Some(g));
    }
}
