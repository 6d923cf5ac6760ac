//! Scene reconstruction from the coding component.
//!
//! The closed-form solver factors `Pc = Up Sp Vp^T` and `Qc = Uq Sq Vq^T`
//! once; each frame then costs four dense products and an elementwise scale:
//!
//! ```text
//! X = Vp [ (Sp Up^T Yc Uq Sq) ./ (sp sq^T + tau) ] Vq^T
//! ```
//!
//! with `sp`, `sq` the squared singular values. The Nesterov solver works on
//! the full two-term model and exists as the iterative baseline.

use std::time::Instant;

use faer::linalg::solvers::Svd;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::JointFilter;
use crate::mat::{gemm, sandwich, sandwich_adjoint, Mat, Op};
use crate::rng;
use crate::sysmat::SystemMatrices;

/// Default regulariser relative to the largest entry of `sp sq^T`.
pub const DEFAULT_TAU_FACTOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct ReconOperator {
    vp: Mat,
    /// `Sp Up^T`, k_p x R.
    left: Mat,
    /// `Uq Sq`, S x k_q.
    right: Mat,
    vq: Mat,
    /// `1 / (sp sq^T + tau)`, zeroed for truncated singular values.
    gain: Mat,
    kept: (Vec<bool>, Vec<bool>),
    sigma_p: Vec<f64>,
    sigma_q: Vec<f64>,
    tau: f64,
}

/// Squared singular values, sorted non-increasing, plus the factors as
/// row-major matrices `(U, s, V)`.
fn thin_svd(m: &Mat, what: &str) -> Result<(Mat, Vec<f64>, Mat)> {
    if !m.is_finite() {
        return Err(Error::Numeric(format!("{what} has non-finite entries")));
    }
    let svd = Svd::new_thin(m.view()).map_err(|e| Error::Numeric(format!("SVD of {what} failed: {e:?}")))?;
    let s: Vec<f64> = svd.S().column_vector().iter().copied().collect();
    Ok((Mat::from_faer(svd.U()), s, Mat::from_faer(svd.V())))
}

impl ReconOperator {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Changes the regulariser without refactoring `Pc` and `Qc`.
    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::invalid(format!("tau must be positive, got {tau}")));
        }
        let (kp, kq) = &self.kept;
        let (sp, sq) = (&self.sigma_p, &self.sigma_q);
        self.gain = Mat::from_fn(sp.len(), sq.len(), |i, j| {
            if kp[i] && kq[j] {
                1.0 / (sp[i] * sq[j] + tau)
            } else {
                0.0
            }
        });
        self.tau = tau;
        Ok(())
    }

    /// `max(sp) * max(sq)`, the scale the default regulariser is relative to.
    pub fn sigma_scale(&self) -> f64 {
        self.sigma_p.first().copied().unwrap_or(0.0) * self.sigma_q.first().copied().unwrap_or(0.0)
    }

    /// Squared singular values of `Pc`.
    pub fn sigma_p(&self) -> &[f64] {
        &self.sigma_p
    }

    /// Squared singular values of `Qc`.
    pub fn sigma_q(&self) -> &[f64] {
        &self.sigma_q
    }

    /// `sp sq^T` as an explicit matrix.
    pub fn sigma_outer(&self) -> Mat {
        Mat::from_fn(self.sigma_p.len(), self.sigma_q.len(), |i, j| {
            self.sigma_p[i] * self.sigma_q[j]
        })
    }

    pub fn scene_shape(&self) -> (usize, usize) {
        (self.vp.rows(), self.vq.rows())
    }

    pub fn meas_shape(&self) -> (usize, usize) {
        (self.left.cols(), self.right.rows())
    }
}

/// Candidate regulariser factors for [`select_tau`].
pub const TAU_FACTOR_GRID: [f64; 9] = [1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2];

/// `tau = DEFAULT_TAU_FACTOR * max(sp) * max(sq)`.
pub fn default_tau(pc: &Mat, qc: &Mat) -> Result<f64> {
    let sp = thin_svd(pc, "Pc")?.1;
    let sq = thin_svd(qc, "Qc")?.1;
    Ok(DEFAULT_TAU_FACTOR * sp[0] * sp[0] * sq[0] * sq[0])
}

pub fn build_recon_operator(pc: &Mat, qc: &Mat, tau: f64) -> Result<ReconOperator> {
    build_recon_operator_truncated(pc, qc, tau, None)
}

/// As [`build_recon_operator`], optionally discarding singular values below
/// `truncate * max` on either side.
pub fn build_recon_operator_truncated(pc: &Mat, qc: &Mat, tau: f64, truncate: Option<f64>) -> Result<ReconOperator> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    if let Some(t) = truncate {
        if !(0.0..1.0).contains(&t) {
            return Err(Error::invalid(format!(
                "truncation threshold must be in [0, 1), got {t}"
            )));
        }
    }
    let (up, sp, vp) = thin_svd(pc, "Pc")?;
    let (uq, sq, vq) = thin_svd(qc, "Qc")?;
    let keep = |s: &[f64]| -> Vec<bool> {
        let cut = truncate.unwrap_or(0.0) * s.first().copied().unwrap_or(0.0);
        s.iter().map(|&v| truncate.is_none() || v > cut).collect()
    };
    let left = Mat::from_fn(sp.len(), up.rows(), |i, r| sp[i] * up.get(r, i));
    let right = Mat::from_fn(uq.rows(), sq.len(), |s, j| uq.get(s, j) * sq[j]);
    let mut op = ReconOperator {
        vp,
        left,
        right,
        vq,
        gain: Mat::zeros(sp.len(), sq.len()),
        kept: (keep(&sp), keep(&sq)),
        sigma_p: sp.iter().map(|v| v * v).collect(),
        sigma_q: sq.iter().map(|v| v * v).collect(),
        tau,
    };
    op.set_tau(tau)?;
    Ok(op)
}

pub fn solve_closed_form(op: &ReconOperator, yc: &Mat) -> Result<Mat> {
    if yc.shape() != op.meas_shape() {
        return Err(Error::invalid(format!(
            "coding component is {}x{}, operator expects {:?}",
            yc.rows(),
            yc.cols(),
            op.meas_shape()
        )));
    }
    let t = gemm(&op.left, Op::N, yc, Op::N)?;
    let core = gemm(&t, Op::N, &op.right, Op::N)?.hadamard(&op.gain)?;
    sandwich(&op.vp, &core, &op.vq)
}

/// Filter then solve: `X = solve(Y - F(Y))`.
pub fn reconstruct_frame(op: &ReconOperator, filter: &JointFilter, y: &Mat) -> Result<Mat> {
    solve_closed_form(op, &filter.coding(y)?)
}

/// Per-channel reconstruction with channel-specific filters, channels in parallel.
pub fn reconstruct_rgb(op: &ReconOperator, filters: &[JointFilter; 3], y: &[Mat; 3]) -> Result<[Mat; 3]> {
    let ((r, g), b) = rayon::join(
        || {
            rayon::join(
                || reconstruct_frame(op, &filters[0], &y[0]),
                || reconstruct_frame(op, &filters[1], &y[1]),
            )
        },
        || reconstruct_frame(op, &filters[2], &y[2]),
    );
    Ok([r?, g?, b?])
}

/// Picks the regulariser from `factors * sigma_scale()` that maximises mean
/// PSNR of filtered reconstructions over `(scene, measurement)` pairs, which
/// should be training data rather than evaluation data. Leaves `op` set to
/// the winner and returns its factor.
pub fn select_tau(op: &mut ReconOperator, filter: &JointFilter, pairs: &[(Mat, Mat)], factors: &[f64]) -> Result<f64> {
    if pairs.is_empty() || factors.is_empty() {
        return Err(Error::invalid("tau selection needs scenes and candidate factors"));
    }
    let coded = pairs
        .iter()
        .map(|(_, y)| filter.coding(y))
        .collect::<Result<Vec<_>>>()?;
    let scale = op.sigma_scale();
    let mut best = (f64::NEG_INFINITY, factors[0]);
    for &f in factors {
        op.set_tau(f * scale)?;
        let mut total = 0.0;
        for ((x, _), yc) in pairs.iter().zip(&coded) {
            let peak = x.max_abs().max(1e-12);
            total += crate::metrics::psnr(&solve_closed_form(op, yc)?, x, peak)?;
        }
        if total > best.0 {
            best = (total, f);
        }
    }
    op.set_tau(best.1 * scale)?;
    Ok(best.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NesterovConfig {
    pub iterations: usize,
    pub step: f64,
    pub tau: f64,
}

impl NesterovConfig {
    /// Step `1/L` for the given system, `L` from [`lipschitz_estimate`].
    pub fn auto(sm: &SystemMatrices, iterations: usize, tau: f64) -> Result<Self> {
        let l = lipschitz_estimate(sm, tau)?;
        Ok(NesterovConfig {
            iterations,
            step: 1.0 / l,
            tau,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 || !(self.step > 0.0) || !(self.tau >= 0.0) {
            return Err(Error::invalid(format!(
                "nesterov config needs iterations >= 1, step > 0, tau >= 0 (got {}, {}, {})",
                self.iterations, self.step, self.tau
            )));
        }
        Ok(())
    }
}

fn apply_model(sm: &SystemMatrices, x: &Mat) -> Result<Mat> {
    let mut y = sandwich(&sm.po, x, &sm.qo)?;
    y.axpy(1.0, &sandwich(&sm.pc, x, &sm.qc)?)?;
    Ok(y)
}

fn apply_adjoint(sm: &SystemMatrices, r: &Mat) -> Result<Mat> {
    let mut g = sandwich_adjoint(&sm.po, r, &sm.qo)?;
    g.axpy(1.0, &sandwich_adjoint(&sm.pc, r, &sm.qc)?)?;
    Ok(g)
}

/// Lipschitz constant of the objective's gradient, `2 (lambda_max(A^T A) + tau)`,
/// with `lambda_max` from 20 power iterations inflated by 2% since the
/// Rayleigh quotient approaches from below.
pub fn lipschitz_estimate(sm: &SystemMatrices, tau: f64) -> Result<f64> {
    use rand::Rng as _;
    let (n, m) = sm.scene_shape();
    let mut r = rng::stream(0, "nesterov/power");
    let mut v = Mat::from_fn(n, m, |_, _| r.random_range(-1.0..1.0));
    let mut lambda = 0.0;
    for _ in 0..20 {
        let norm = v.frobenius_norm();
        if norm == 0.0 {
            break;
        }
        v = v.scale(1.0 / norm);
        let w = apply_adjoint(sm, &apply_model(sm, &v)?)?;
        lambda = w.frobenius_norm();
        v = w;
    }
    Ok(2.0 * (1.02 * lambda + tau))
}

/// `||A(X) - Y||^2 + tau ||X||^2`.
pub fn objective(sm: &SystemMatrices, x: &Mat, y: &Mat, tau: f64) -> Result<f64> {
    objective_from_image(&apply_model(sm, x)?, x, y, tau)
}

fn objective_from_image(ax: &Mat, x: &Mat, y: &Mat, tau: f64) -> Result<f64> {
    let rn = ax.sub(y)?.frobenius_norm();
    let xn = x.frobenius_norm();
    Ok(rn * rn + tau * xn * xn)
}

pub fn solve_nesterov(sm: &SystemMatrices, y: &Mat, cfg: &NesterovConfig) -> Result<Mat> {
    Ok(nesterov(sm, y, cfg, false)?.0)
}

/// As [`solve_nesterov`], also returning the objective after every iteration.
pub fn solve_nesterov_traced(sm: &SystemMatrices, y: &Mat, cfg: &NesterovConfig) -> Result<(Mat, Vec<f64>)> {
    nesterov(sm, y, cfg, true)
}

fn nesterov(sm: &SystemMatrices, y: &Mat, cfg: &NesterovConfig, trace: bool) -> Result<(Mat, Vec<f64>)> {
    cfg.validate()?;
    if y.shape() != sm.meas_shape() {
        return Err(Error::invalid(format!(
            "measurement is {}x{}, system expects {:?}",
            y.rows(),
            y.cols(),
            sm.meas_shape()
        )));
    }
    let (n, m) = sm.scene_shape();
    // Images under the model are carried along by linearity, so each
    // iteration costs one forward and one adjoint application and the
    // objective comes for free.
    let mut x = Mat::zeros(n, m);
    let mut ax = Mat::zeros(y.rows(), y.cols());
    let mut fx = objective_from_image(&ax, &x, y, cfg.tau)?;
    let mut z = x.clone();
    let mut az = ax.clone();
    let mut history = Vec::new();
    for k in 1..=cfg.iterations {
        let mut grad = apply_adjoint(sm, &az.sub(y)?)?.scale(2.0);
        grad.axpy(2.0 * cfg.tau, &z)?;
        let ag = apply_model(sm, &grad)?;
        let mut u = z;
        u.axpy(-cfg.step, &grad)?;
        let mut au = az;
        au.axpy(-cfg.step, &ag)?;
        let fu = objective_from_image(&au, &u, y, cfg.tau)?;
        if !fu.is_finite() || !u.is_finite() {
            return Err(Error::SolverDiverged { iteration: k });
        }
        // Monotone safeguard: a step that raises the objective still feeds
        // the momentum term but is not accepted as the iterate.
        let (x_prev, ax_prev) = (x.clone(), ax.clone());
        if fu <= fx {
            x = u.clone();
            ax = au.clone();
            fx = fu;
        }
        let (a, b) = ((k as f64 + 1.0) / (k as f64 + 2.0), (k as f64 - 1.0) / (k as f64 + 2.0));
        z = x.clone();
        z.axpy(a, &u.sub(&x)?)?;
        z.axpy(b, &x.sub(&x_prev)?)?;
        az = ax.clone();
        az.axpy(a, &au.sub(&ax)?)?;
        az.axpy(b, &ax.sub(&ax_prev)?)?;
        if trace {
            history.push(fx);
        }
    }
    Ok((x, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub frames: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub method: String,
}

/// Runs `frame(i)` for `i in 0..frames` and summarises wall-clock latency.
pub fn time_frames(method: &str, frames: usize, mut frame: impl FnMut(usize) -> Result<()>) -> Result<TimingReport> {
    if frames == 0 {
        return Err(Error::invalid("timing needs at least one frame"));
    }
    let mut ms = Vec::with_capacity(frames);
    for i in 0..frames {
        let t = Instant::now();
        frame(i)?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = ms.iter().sum::<f64>() / frames as f64;
    ms.sort_by(|a, b| a.total_cmp(b));
    let idx = ((0.95 * frames as f64).ceil() as usize).clamp(1, frames) - 1;
    Ok(TimingReport {
        frames,
        mean_ms,
        p95_ms: ms[idx],
        method: method.to_string(),
    })
}
