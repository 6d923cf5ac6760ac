//! Frequency/spatial joint filter separating the low-frequency open component
//! of a measurement from the mask-coded component:
//!
//! ```text
//! F(Y) = Phi_s ⊙ IDCT[Phi_f ⊙ DCT(Y)],     Yc ≈ Y - F(Y)
//! ```
//!
//! Parameters are fitted on a virtual dataset rendered through the system
//! matrices, where the true open component is known exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dct::Dct2d;
use crate::error::{Error, Result};
use crate::io;
use crate::mat::{sandwich, Mat};
use crate::sysmat::SystemMatrices;

#[derive(Clone, Debug, PartialEq)]
pub struct JointFilterParams {
    /// Per-coefficient gains in the DCT domain.
    pub phi_f: Mat,
    /// Per-pixel gains applied after the inverse DCT.
    pub phi_s: Mat,
}

impl JointFilterParams {
    pub fn new(phi_f: Mat, phi_s: Mat) -> Result<Self> {
        phi_f.check_same_shape(&phi_s, "joint filter parameters")?;
        Ok(JointFilterParams { phi_f, phi_s })
    }

    /// Both units are identities: `F(Y) = Y`.
    pub fn identity(rows: usize, cols: usize) -> Self {
        JointFilterParams {
            phi_f: Mat::filled(rows, cols, 1.0),
            phi_s: Mat::filled(rows, cols, 1.0),
        }
    }

    /// Separable raised-cosine low-pass over the lowest 10% of each frequency
    /// axis, unit spatial gains.
    pub fn low_pass(rows: usize, cols: usize) -> Self {
        let taper = |k: usize, n: usize| {
            let cutoff = (0.1 * n as f64).max(1.0);
            let t = k as f64 / cutoff;
            if t >= 1.0 {
                0.0
            } else {
                0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        };
        JointFilterParams {
            phi_f: Mat::from_fn(rows, cols, |u, v| taper(u, rows) * taper(v, cols)),
            phi_s: Mat::filled(rows, cols, 1.0),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.phi_f.shape()
    }

    /// Writes `phi_f.ltm`, `phi_s.ltm` and `filter.json`.
    pub fn save(&self, dir: impl AsRef<Path>, meta: &FilterMeta) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        io::save_mat(dir.join("phi_f.ltm"), &self.phi_f)?;
        io::save_mat(dir.join("phi_s.ltm"), &self.phi_s)?;
        io::save_json(dir.join("filter.json"), meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        JointFilterParams::new(
            io::load_mat(dir.join("phi_f.ltm"))?,
            io::load_mat(dir.join("phi_s.ltm"))?,
        )
    }
}

/// Sidecar stored next to persisted filter parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterMeta {
    pub config: FilterTrainConfig,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_scenes: usize,
}

/// A filter bound to a planned DCT for repeated application.
#[derive(Clone, Debug)]
pub struct JointFilter {
    params: JointFilterParams,
    dct: Dct2d,
}

impl JointFilter {
    pub fn new(params: JointFilterParams) -> Result<Self> {
        let (r, s) = params.shape();
        Ok(JointFilter {
            dct: Dct2d::new(r, s)?,
            params,
        })
    }

    pub fn params(&self) -> &JointFilterParams {
        &self.params
    }

    /// Estimated open component `F(Y)`.
    pub fn open(&self, y: &Mat) -> Result<Mat> {
        if y.shape() != self.params.shape() {
            return Err(Error::invalid(format!(
                "filter is {}x{}, measurement is {}x{}",
                self.params.phi_f.rows(),
                self.params.phi_f.cols(),
                y.rows(),
                y.cols()
            )));
        }
        let spec = self.dct.forward(y)?.hadamard(&self.params.phi_f)?;
        self.dct.inverse(&spec)?.hadamard(&self.params.phi_s)
    }

    /// Estimated coding component `Y - F(Y)`.
    pub fn coding(&self, y: &Mat) -> Result<Mat> {
        y.sub(&self.open(y)?)
    }
}

pub fn apply_joint_filter(p: &JointFilterParams, y: &Mat) -> Result<Mat> {
    JointFilter::new(p.clone())?.open(y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterTrainConfig {
    /// Step size in the diagonally rescaled parameter space.
    pub learning_rate: f64,
    pub epochs: usize,
    /// Samples held in memory per gradient accumulation pass; the update is
    /// always full-batch.
    pub batch: usize,
    pub seed: u64,
}

impl Default for FilterTrainConfig {
    fn default() -> Self {
        FilterTrainConfig {
            learning_rate: 0.5,
            epochs: 200,
            batch: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean squared error per pixel before each epoch's update, plus the final value.
    pub loss_history: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.loss_history[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().unwrap()
    }
}

/// One training pair: measurement and its exact open component, with the
/// measurement already in the DCT domain.
struct Sample {
    spectrum: Mat,
    open: Mat,
}

/// Renders the virtual dataset: `Y = Po X Qo^T + Pc X Qc^T`, target `Po X Qo^T`.
fn render_samples(sm: &SystemMatrices, scenes: &[Mat], dct: &Dct2d) -> Result<Vec<Sample>> {
    scenes
        .iter()
        .map(|x| {
            if x.shape() != sm.scene_shape() {
                return Err(Error::invalid(format!(
                    "training scene is {}x{}, system expects {:?}",
                    x.rows(),
                    x.cols(),
                    sm.scene_shape()
                )));
            }
            let open = sandwich(&sm.po, x, &sm.qo)?;
            let mut y = open.clone();
            y.axpy(1.0, &sandwich(&sm.pc, x, &sm.qc)?)?;
            Ok(Sample {
                spectrum: dct.forward(&y)?,
                open,
            })
        })
        .collect()
}

/// Loss and gradients of `mean_b mean_px (F(Y_b) - Yo_b)^2` together with
/// the Gauss-Newton diagonal used to rescale the step.
struct Evaluation {
    loss: f64,
    grad_f: Mat,
    grad_s: Mat,
    curv_f: Mat,
    curv_s: Mat,
}

fn evaluate(p: &JointFilterParams, samples: &[Sample], dct: &Dct2d, chunk: usize) -> Result<Evaluation> {
    let (r, s) = p.shape();
    let norm = 2.0 / (samples.len() * r * s) as f64;
    let mut loss = 0.0;
    let mut grad_f = Mat::zeros(r, s);
    let mut grad_s = Mat::zeros(r, s);
    let mut spec_sq = Mat::zeros(r, s);
    let mut z_sq = Mat::zeros(r, s);
    for block in samples.chunks(chunk.max(1)) {
        for sample in block {
            let z = dct.inverse(&sample.spectrum.hadamard(&p.phi_f)?)?;
            let err = z.hadamard(&p.phi_s)?.sub(&sample.open)?;
            loss += err.as_slice().iter().map(|e| e * e).sum::<f64>();
            grad_s.axpy(norm, &err.hadamard(&z)?)?;
            let back = dct.forward(&err.hadamard(&p.phi_s)?)?;
            grad_f.axpy(norm, &back.hadamard(&sample.spectrum)?)?;
            spec_sq.axpy(norm, &sample.spectrum.map(|v| v * v))?;
            z_sq.axpy(norm, &z.map(|v| v * v))?;
        }
    }
    let phi_s_ms = p.phi_s.as_slice().iter().map(|v| v * v).sum::<f64>() / (r * s) as f64;
    Ok(Evaluation {
        loss: loss / (samples.len() * r * s) as f64,
        grad_f,
        grad_s,
        curv_f: spec_sq.scale(phi_s_ms),
        curv_s: z_sq,
    })
}

fn rescaled_step(param: &mut Mat, grad: &Mat, curv: &Mat, lr: f64) {
    let floor = 1e-6 * curv.max().max(1e-300);
    for ((w, g), h) in param
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(curv.as_slice())
    {
        *w -= lr * g / (h + floor);
    }
}

/// Fits the joint filter by full-batch gradient descent from the low-pass
/// initialisation. Each parameter's step is divided by its Gauss-Newton
/// curvature, since DCT coefficient energies span many orders of magnitude.
pub fn train_filter(
    sm: &SystemMatrices,
    scenes: &[Mat],
    cfg: &FilterTrainConfig,
) -> Result<(JointFilterParams, TrainReport)> {
    if scenes.len() < 2 {
        return Err(Error::invalid(format!(
            "filter training needs at least 2 scenes, got {}",
            scenes.len()
        )));
    }
    if !(cfg.learning_rate > 0.0) || cfg.epochs == 0 {
        return Err(Error::invalid("learning rate must be positive and epochs >= 1"));
    }
    let (r, s) = sm.meas_shape();
    let dct = Dct2d::new(r, s)?;
    let samples = render_samples(sm, scenes, &dct)?;
    let mut params = JointFilterParams::low_pass(r, s);
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..cfg.epochs {
        let ev = evaluate(&params, &samples, &dct, cfg.batch)?;
        if !ev.loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss: ev.loss });
        }
        history.push(ev.loss);
        rescaled_step(&mut params.phi_f, &ev.grad_f, &ev.curv_f, cfg.learning_rate);
        rescaled_step(&mut params.phi_s, &ev.grad_s, &ev.curv_s, cfg.learning_rate);
    }
    let last = evaluate(&params, &samples, &dct, cfg.batch)?.loss;
    if !last.is_finite() || !params.phi_f.is_finite() || !params.phi_s.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: cfg.epochs,
            loss: last,
        });
    }
    history.push(last);
    Ok((params, TrainReport { loss_history: history }))
}

/// Loss and analytic gradients at `p`, exposed for gradient checking.
pub fn loss_and_gradient(sm: &SystemMatrices, scenes: &[Mat], p: &JointFilterParams) -> Result<(f64, Mat, Mat)> {
    let (r, s) = sm.meas_shape();
    let dct = Dct2d::new(r, s)?;
    let samples = render_samples(sm, scenes, &dct)?;
    let ev = evaluate(p, &samples, &dct, samples.len())?;
    Ok((ev.loss, ev.grad_f, ev.grad_s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::smooth_random;

    fn y(r: usize, s: usize, seed: u64) -> Mat {
        let mut st = seed;
        Mat::from_fn(r, s, |_, _| {
            st = st.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (st >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn identity_and_annihilation() {
        let m = y(12, 9, 1);
        let id = apply_joint_filter(&JointFilterParams::identity(12, 9), &m).unwrap();
        assert!(id.max_abs_diff(&m).unwrap() < 1e-12);
        let zero = JointFilterParams::new(Mat::zeros(12, 9), y(12, 9, 2)).unwrap();
        assert_eq!(apply_joint_filter(&zero, &m).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn linear_and_partitions_the_measurement() {
        let p = JointFilterParams::new(y(10, 14, 3), y(10, 14, 4)).unwrap();
        let f = JointFilter::new(p).unwrap();
        let (a, b) = (y(10, 14, 5), y(10, 14, 6));
        let mut combo = a.scale(2.0);
        combo.axpy(-0.5, &b).unwrap();
        let mut expect = f.open(&a).unwrap().scale(2.0);
        expect.axpy(-0.5, &f.open(&b).unwrap()).unwrap();
        assert!(f.open(&combo).unwrap().max_abs_diff(&expect).unwrap() < 1e-9);
        let open = f.open(&a).unwrap();
        let coding = f.coding(&a).unwrap();
        assert!(open.add(&coding).unwrap().max_abs_diff(&a).unwrap() < 1e-14);
    }

    #[test]
    fn shape_mismatch() {
        let f = JointFilter::new(JointFilterParams::identity(4, 4)).unwrap();
        assert!(f.open(&Mat::zeros(4, 5)).is_err());
        assert!(JointFilterParams::new(Mat::zeros(2, 2), Mat::zeros(2, 3)).is_err());
    }

    fn toy_system() -> SystemMatrices {
        let m = |s: u64| y(8, 8, s).map(|v| v - 0.3);
        SystemMatrices::new(y(8, 8, 11), y(8, 8, 12), m(13), m(14)).unwrap()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let sm = toy_system();
        let scenes: Vec<Mat> = (0..3).map(|s| y(8, 8, 20 + s)).collect();
        let p = JointFilterParams::new(y(8, 8, 30), y(8, 8, 31).map(|v| v + 0.5)).unwrap();
        let (_, gf, gs) = loss_and_gradient(&sm, &scenes, &p).unwrap();
        let h = 1e-5;
        for (which, grad) in [(0, &gf), (1, &gs)] {
            for idx in [0usize, 9, 27, 63] {
                let bump = |delta: f64| {
                    let mut q = p.clone();
                    let target = if which == 0 { &mut q.phi_f } else { &mut q.phi_s };
                    target.as_mut_slice()[idx] += delta;
                    loss_and_gradient(&sm, &scenes, &q).unwrap().0
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = grad.as_slice()[idx];
                assert!(
                    (fd - an).abs() <= 1e-4 * an.abs().max(1e-8),
                    "param {which}[{idx}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn vanishing_coding_term_learns_identity() {
        let g = crate::sysmat::Geometry::desk(16, 32);
        let phi = crate::mask::random_vector(64, 1).unwrap();
        let full = crate::sysmat::generate_system_matrices(&phi, &g).unwrap();
        let sm = SystemMatrices::new(full.po.clone(), full.qo.clone(), Mat::zeros(32, 16), Mat::zeros(32, 16)).unwrap();
        let scenes: Vec<Mat> = (0..6).map(|s| smooth_random(16, 16, s)).collect();
        let cfg = FilterTrainConfig {
            epochs: 800,
            ..Default::default()
        };
        let (p, report) = train_filter(&sm, &scenes, &cfg).unwrap();
        assert!(report.final_loss() <= report.initial_loss());
        let x = smooth_random(16, 16, 99);
        let meas = crate::sysmat::forward(&sm, &x, 0.0, 0).unwrap();
        let out = apply_joint_filter(&p, &meas).unwrap();
        let rel = out.rel_error(&meas).unwrap();
        assert!(rel <= 1e-3, "relative residual {rel}");
    }

    #[test]
    fn training_rejects_bad_input() {
        let sm = toy_system();
        let cfg = FilterTrainConfig::default();
        assert!(train_filter(&sm, &[y(8, 8, 1)], &cfg).is_err());
        assert!(train_filter(&sm, &[y(8, 8, 1), y(8, 7, 2)], &cfg).is_err());
        let bad = FilterTrainConfig {
            learning_rate: 0.0,
            ..cfg
        };
        assert!(train_filter(&sm, &[y(8, 8, 1), y(8, 8, 2)], &bad).is_err());
    }

    #[test]
    fn persisted_parameters_reload() {
        let dir = tempfile::tempdir().unwrap();
        let p = JointFilterParams::low_pass(16, 12);
        let meta = FilterMeta {
            config: FilterTrainConfig::default(),
            initial_loss: 1.0,
            final_loss: 0.5,
            train_scenes: 2,
        };
        p.save(dir.path(), &meta).unwrap();
        let back = JointFilterParams::load(dir.path()).unwrap();
        assert!(back.phi_f.max_abs_diff(&p.phi_f).unwrap() < 1e-7);
        let m: FilterMeta = io::load_json(dir.path().join("filter.json")).unwrap();
        assert_eq!(m, meta);
    }
}
