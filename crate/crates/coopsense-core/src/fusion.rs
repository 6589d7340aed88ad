//! Position-domain Fisher information, CRLB, and fusion-center localization.
//!
//! The FIM of the 2D target position sums per-receiver terms in which the
//! signal Jacobian is projected onto the KLT basis and weighted by the
//! per-coefficient precision, which depends on the allocated quantization
//! bits. Localizers share one scheme: coarse grid scan over the search
//! region, then Gauss-Newton refinement with an analytic gradient.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use num_complex::Complex64;

use crate::error::{CoopError, Result};
use crate::estimator::LocalEstimate;
use crate::klt::{stack_real, EtaModel, KltCodec, SampleWindow};
use crate::signal::{dist, pathloss_db, TargetRegion, Waveform, SPEED_OF_LIGHT};

/// Precision weight of one KLT coefficient given its bit allocation:
/// y = 2^{2X-1} / (gamma + 2^{2X-2} sigma^2), evaluated in the numerically
/// stable rescaled form. Equals 1 / (sigma^2/2 + eta).
pub fn info_weight(gamma: f64, sigma2: f64, bits: f64, model: EtaModel) -> f64 {
    match model {
        EtaModel::PaperHalfBit => 2.0 / (gamma * 2f64.powf(2.0 - 2.0 * bits) + sigma2),
        EtaModel::RateDistortionExact => {
            let m = 2f64.powf(2.0 * bits) - 1.0;
            if m <= 0.0 {
                0.0
            } else {
                m / (gamma + m * sigma2 / 2.0)
            }
        }
    }
}

/// d y / d X of [info_weight].
pub fn info_weight_grad(gamma: f64, sigma2: f64, bits: f64, model: EtaModel) -> f64 {
    let ln2 = std::f64::consts::LN_2;
    match model {
        EtaModel::PaperHalfBit => {
            let a = 2f64.powf(2.0 - 2.0 * bits);
            let denom = gamma * a + sigma2;
            4.0 * ln2 * gamma * a / (denom * denom)
        }
        EtaModel::RateDistortionExact => {
            let m = 2f64.powf(2.0 * bits) - 1.0;
            let denom = gamma + m * sigma2 / 2.0;
            2.0 * ln2 * gamma * (m + 1.0) / (denom * denom)
        }
    }
}

/// Gradient of the two-hop delay with respect to the target position.
pub fn delay_gradient(theta: [f64; 2], tx: [f64; 2], rx: [f64; 2]) -> Result<Vector2<f64>> {
    let d_t = dist(tx, theta);
    let d_r = dist(rx, theta);
    if d_t < 1e-9 || d_r < 1e-9 {
        return Err(CoopError::CoincidentGeometry);
    }
    Ok(Vector2::new(
        ((theta[0] - tx[0]) / d_t + (theta[0] - rx[0]) / d_r) / SPEED_OF_LIGHT,
        ((theta[1] - tx[1]) / d_t + (theta[1] - rx[1]) / d_r) / SPEED_OF_LIGHT,
    ))
}

/// Jacobian of the stacked noiseless window signal w.r.t. theta = [x, y]
/// (2 x 2K_n; rows are d/dx and d/dy).
///
/// Both rows are multiples of the stacked alpha-weighted pulse-derivative
/// vector: d s / d theta = (d tau / d theta) (d s / d tau) with
/// d s / d tau = -sqrt(E) alpha ds/dt.
pub fn signal_jacobian(
    theta: [f64; 2],
    tx: [f64; 2],
    rx: [f64; 2],
    alpha_hat: Complex64,
    window: &SampleWindow,
    w: &Waveform,
    e: f64,
) -> Result<DMatrix<f64>> {
    let dtau = delay_gradient(theta, tx, rx)?;
    let tau = (dist(tx, theta) + dist(rx, theta)) / SPEED_OF_LIGHT;
    let k_n = window.k_n();
    let amp = e.sqrt();
    let mut jac = DMatrix::zeros(2, 2 * k_n);
    for (j, &k) in window.indices.iter().enumerate() {
        let sd = w.pulse_deriv(k as f64 * w.sample_period - tau);
        let ds_dtau_re = -amp * alpha_hat.re * sd;
        let ds_dtau_im = -amp * alpha_hat.im * sd;
        for row in 0..2 {
            jac[(row, j)] = dtau[row] * ds_dtau_re;
            jac[(row, k_n + j)] = dtau[row] * ds_dtau_im;
        }
    }
    Ok(jac)
}

/// Per-receiver ingredients of the position FIM.
#[derive(Debug, Clone)]
pub struct ReceiverContext {
    pub receiver_id: usize,
    /// d s_n / d theta, 2 x 2K_n.
    pub jacobian: DMatrix<f64>,
    /// B_n = (d s_n / d theta) U_n.
    pub projected: DMatrix<f64>,
    pub gammas: DVector<f64>,
    pub sigma2: f64,
}

impl ReceiverContext {
    pub fn dim(&self) -> usize {
        self.gammas.len()
    }
}

/// FIM context over all candidate receivers.
#[derive(Debug, Clone)]
pub struct FimContext {
    pub receivers: Vec<ReceiverContext>,
    pub eta_model: EtaModel,
}

impl FimContext {
    pub fn n(&self) -> usize {
        self.receivers.len()
    }
}

/// Builds one receiver's FIM context from its estimate, window and codec,
/// with the Jacobian evaluated at `theta_ref`.
pub fn build_receiver_context(
    theta_ref: [f64; 2],
    tx: [f64; 2],
    rx: [f64; 2],
    est: &LocalEstimate,
    window: &SampleWindow,
    codec: &KltCodec,
    w: &Waveform,
    e: f64,
) -> Result<ReceiverContext> {
    let jacobian = signal_jacobian(theta_ref, tx, rx, est.alpha_hat, window, w, e)?;
    let projected = &jacobian * &codec.basis;
    Ok(ReceiverContext {
        receiver_id: est.receiver_id,
        jacobian,
        projected,
        gammas: codec.gammas.clone(),
        sigma2: codec.sigma2,
    })
}

/// J = sum_{n in omega} B_n diag(y_n(X_n)) B_n^T.
pub fn fim(ctx: &FimContext, bits: &[DVector<f64>], omega: &[usize]) -> Matrix2<f64> {
    let mut j = Matrix2::zeros();
    for &n in omega {
        let rc = &ctx.receivers[n];
        let x = &bits[n];
        for col in 0..rc.dim() {
            let y = info_weight(rc.gammas[col], rc.sigma2, x[col], ctx.eta_model);
            let b = rc.projected.column(col);
            j[(0, 0)] += y * b[0] * b[0];
            j[(0, 1)] += y * b[0] * b[1];
            j[(1, 1)] += y * b[1] * b[1];
        }
    }
    j[(1, 0)] = j[(0, 1)];
    j
}

/// FIM with unlimited bits: every coefficient at its noise-only precision.
pub fn fim_unquantized(ctx: &FimContext, omega: &[usize]) -> Matrix2<f64> {
    let mut j = Matrix2::zeros();
    for &n in omega {
        let rc = &ctx.receivers[n];
        let y = 2.0 / rc.sigma2;
        for col in 0..rc.dim() {
            let b = rc.projected.column(col);
            j[(0, 0)] += y * b[0] * b[0];
            j[(0, 1)] += y * b[0] * b[1];
            j[(1, 1)] += y * b[1] * b[1];
        }
    }
    j[(1, 0)] = j[(0, 1)];
    j
}

/// tr(J^{-1}); errors when J is singular at the stated threshold.
pub fn crlb_theta(j: &Matrix2<f64>) -> Result<f64> {
    let tr = j[(0, 0)] + j[(1, 1)];
    let det = j[(0, 0)] * j[(1, 1)] - j[(0, 1)] * j[(1, 0)];
    // Smallest eigenvalue of the symmetric 2x2.
    let gap = (0.25 * (j[(0, 0)] - j[(1, 1)]).powi(2) + j[(0, 1)] * j[(1, 0)]).max(0.0);
    let lambda_min = 0.5 * tr - gap.sqrt();
    if !(lambda_min > 1e-12 * tr) || !det.is_finite() {
        return Err(CoopError::Unlocalizable);
    }
    Ok(tr / det)
}

/// Minimum achievable CRLB for a selection: unlimited bits on all members.
pub fn epsilon_star(ctx: &FimContext, omega: &[usize]) -> Result<f64> {
    crlb_theta(&fim_unquantized(ctx, omega))
}

/// Noise-plus-quantization precision of one receiver's window observation.
#[derive(Debug, Clone)]
pub enum Precision {
    /// (Q_w + Q_n)^{-1} = U diag(weights) U^T.
    KltDiagonal {
        basis: DMatrix<f64>,
        weights: DVector<f64>,
    },
    /// Diagonal precision in the original stacked domain.
    Diagonal { weights: DVector<f64> },
}

/// One receiver's upload as seen by the fusion center.
#[derive(Debug, Clone)]
pub struct FusionObservation {
    pub receiver_id: usize,
    pub rx_pos: [f64; 2],
    pub alpha_hat: Complex64,
    pub window: SampleWindow,
    /// Observed (possibly reconstructed) stacked window vector.
    pub r_tilde: DVector<f64>,
    pub precision: Precision,
}

/// Localization output.
#[derive(Debug, Clone)]
pub struct PositionEstimate {
    pub theta: [f64; 2],
    pub objective: f64,
    pub iterations: usize,
}

/// Grid-then-refine options shared by all localizers.
#[derive(Debug, Clone, Copy)]
pub struct LocalizeOptions {
    /// Maximum coarse-grid cell edge, meters.
    pub grid_cell: f64,
    pub max_refine_iters: usize,
    pub grad_tol: f64,
}

impl Default for LocalizeOptions {
    fn default() -> Self {
        Self {
            grid_cell: 5.0,
            max_refine_iters: 80,
            grad_tol: 1e-8,
        }
    }
}

fn clamp_to_region(theta: [f64; 2], region: &TargetRegion) -> [f64; 2] {
    [
        theta[0].clamp(region.x_min, region.x_max),
        theta[1].clamp(region.y_min, region.y_max),
    ]
}

/// Generic maximizer: coarse scan of `objective` on a grid covering the
/// region (first maximum wins, scanning x then y ascending), followed by
/// damped Gauss-Newton ascent using `grad_hess`.
fn grid_then_refine(
    region: &TargetRegion,
    opts: &LocalizeOptions,
    objective: &dyn Fn([f64; 2]) -> f64,
    grad_hess: &dyn Fn([f64; 2]) -> (Vector2<f64>, Matrix2<f64>),
) -> Result<PositionEstimate> {
    if region.is_empty() {
        return Err(CoopError::EmptyRegion);
    }
    let nx = ((region.x_max - region.x_min) / opts.grid_cell).ceil().max(1.0) as usize;
    let ny = ((region.y_max - region.y_min) / opts.grid_cell).ceil().max(1.0) as usize;
    let mut best = [region.x_min, region.y_min];
    let mut best_obj = f64::NEG_INFINITY;
    for ix in 0..=nx {
        for iy in 0..=ny {
            let theta = [
                region.x_min + (region.x_max - region.x_min) * ix as f64 / nx as f64,
                region.y_min + (region.y_max - region.y_min) * iy as f64 / ny as f64,
            ];
            let obj = objective(theta);
            if obj > best_obj {
                best_obj = obj;
                best = theta;
            }
        }
    }

    let mut theta = best;
    let mut obj = best_obj;
    let mut iters = 0;
    for _ in 0..opts.max_refine_iters {
        iters += 1;
        let (g, h) = grad_hess(theta);
        if g.norm() <= opts.grad_tol {
            break;
        }
        // Gauss-Newton direction with a gradient fallback when H is flat.
        let det = h[(0, 0)] * h[(1, 1)] - h[(0, 1)] * h[(1, 0)];
        let dir = if det.abs() > 1e-30 && h[(0, 0)] > 0.0 {
            Vector2::new(
                (h[(1, 1)] * g[0] - h[(0, 1)] * g[1]) / det,
                (h[(0, 0)] * g[1] - h[(1, 0)] * g[0]) / det,
            )
        } else {
            g / (1.0 + g.norm())
        };
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = clamp_to_region([theta[0] + alpha * dir[0], theta[1] + alpha * dir[1]], region);
            let cand_obj = objective(cand);
            if cand_obj > obj {
                theta = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(PositionEstimate {
        theta,
        objective: obj,
        iterations: iters,
    })
}

/// Noiseless model window signal s_n(theta) for one observation.
fn model_signal(
    obs: &FusionObservation,
    tx: [f64; 2],
    w: &Waveform,
    e: f64,
    theta: [f64; 2],
) -> DVector<f64> {
    let tau = (dist(tx, theta) + dist(obs.rx_pos, theta)) / SPEED_OF_LIGHT;
    let k_n = obs.window.k_n();
    let amp = e.sqrt();
    let mut s = DVector::zeros(2 * k_n);
    for (j, &k) in obs.window.indices.iter().enumerate() {
        let sv = w.pulse(k as f64 * w.sample_period - tau);
        s[j] = amp * obs.alpha_hat.re * sv;
        s[k_n + j] = amp * obs.alpha_hat.im * sv;
    }
    s
}

/// Log-likelihood of Eq.-(20) form (constant dropped):
/// -1/2 sum_n (r~_n - s_n)^T (Q_w + Q_n)^{-1} (r~_n - s_n).
pub fn fusion_objective(
    observations: &[FusionObservation],
    tx: [f64; 2],
    w: &Waveform,
    e: f64,
    theta: [f64; 2],
) -> f64 {
    let mut acc = 0.0;
    for obs in observations {
        let v = &obs.r_tilde - model_signal(obs, tx, w, e, theta);
        match &obs.precision {
            Precision::KltDiagonal { basis, weights } => {
                let u = basis.transpose() * v;
                for j in 0..u.len() {
                    acc += weights[j] * u[j] * u[j];
                }
            }
            Precision::Diagonal { weights } => {
                for j in 0..v.len() {
                    acc += weights[j] * v[j] * v[j];
                }
            }
        }
    }
    -0.5 * acc
}

/// Analytic gradient of [fusion_objective] and its Gauss-Newton Hessian.
pub fn fusion_grad_hess(
    observations: &[FusionObservation],
    tx: [f64; 2],
    w: &Waveform,
    e: f64,
    theta: [f64; 2],
) -> (Vector2<f64>, Matrix2<f64>) {
    let mut g = Vector2::zeros();
    let mut h = Matrix2::zeros();
    for obs in observations {
        let jac = match signal_jacobian(theta, tx, obs.rx_pos, obs.alpha_hat, &obs.window, w, e) {
            Ok(j) => j,
            Err(_) => continue,
        };
        let v = &obs.r_tilde - model_signal(obs, tx, w, e, theta);
        // P v and J P J^T with P in either representation.
        match &obs.precision {
            Precision::KltDiagonal { basis, weights } => {
                let b = &jac * basis;
                let u = basis.transpose() * v;
                for j in 0..u.len() {
                    let wy = weights[j];
                    g[0] += b[(0, j)] * wy * u[j];
                    g[1] += b[(1, j)] * wy * u[j];
                    h[(0, 0)] += wy * b[(0, j)] * b[(0, j)];
                    h[(0, 1)] += wy * b[(0, j)] * b[(1, j)];
                    h[(1, 1)] += wy * b[(1, j)] * b[(1, j)];
                }
            }
            Precision::Diagonal { weights } => {
                for j in 0..v.len() {
                    let wy = weights[j];
                    g[0] += jac[(0, j)] * wy * v[j];
                    g[1] += jac[(1, j)] * wy * v[j];
                    h[(0, 0)] += wy * jac[(0, j)] * jac[(0, j)];
                    h[(0, 1)] += wy * jac[(0, j)] * jac[(1, j)];
                    h[(1, 1)] += wy * jac[(1, j)] * jac[(1, j)];
                }
            }
        }
    }
    h[(1, 0)] = h[(0, 1)];
    (g, h)
}

/// ML localization at the fusion center from quantized window uploads.
pub fn fc_ml_localize(
    observations: &[FusionObservation],
    tx: [f64; 2],
    w: &Waveform,
    e: f64,
    region: &TargetRegion,
    opts: &LocalizeOptions,
) -> Result<PositionEstimate> {
    if observations.is_empty() {
        return Err(CoopError::TooFewReceivers { need: 1, got: 0 });
    }
    grid_then_refine(
        region,
        opts,
        &|theta| fusion_objective(observations, tx, w, e, theta),
        &|theta| fusion_grad_hess(observations, tx, w, e, theta),
    )
}

/// TOA-weighted information-domain localization:
/// argmin sum_n (tau-hat_n - tau_n(theta))^2 / CRLB_tau_n.
pub fn baseline_toa_idcs(
    estimates: &[LocalEstimate],
    rx_pos: &[[f64; 2]],
    tx: [f64; 2],
    region: &TargetRegion,
    opts: &LocalizeOptions,
) -> Result<PositionEstimate> {
    if estimates.len() < 2 {
        return Err(CoopError::TooFewReceivers {
            need: 2,
            got: estimates.len(),
        });
    }
    let objective = |theta: [f64; 2]| -> f64 {
        let mut cost = 0.0;
        for est in estimates {
            let tau = (dist(tx, theta) + dist(rx_pos[est.receiver_id], theta)) / SPEED_OF_LIGHT;
            cost += (est.tau_hat - tau).powi(2) / est.crlb_tau;
        }
        -cost
    };
    let grad_hess = |theta: [f64; 2]| -> (Vector2<f64>, Matrix2<f64>) {
        let mut g = Vector2::zeros();
        let mut h = Matrix2::zeros();
        for est in estimates {
            let rx = rx_pos[est.receiver_id];
            let tau = (dist(tx, theta) + dist(rx, theta)) / SPEED_OF_LIGHT;
            if let Ok(dt) = delay_gradient(theta, tx, rx) {
                let wgt = 2.0 / est.crlb_tau;
                g += dt * (wgt * (est.tau_hat - tau));
                h += dt * dt.transpose() * wgt;
            }
        }
        (g, h)
    };
    grid_then_refine(region, opts, &objective, &grad_hess)
}

/// Path-loss model parameters the FC uses for the RSS residual.
#[derive(Debug, Clone, Copy)]
pub struct RssModel {
    pub tx: [f64; 2],
    pub carrier_ghz: f64,
    pub reflect_amp: f64,
}

impl RssModel {
    /// |alpha(theta)|^2 under the two-hop LOS path-loss model, with the
    /// same 1 m near-field floor as the synthesis side.
    fn alpha_sq(&self, rx: [f64; 2], theta: [f64; 2]) -> Result<f64> {
        let l1 = pathloss_db(dist(self.tx, theta).max(1.0) / 1e3, self.carrier_ghz)?;
        let l2 = pathloss_db(dist(rx, theta).max(1.0) / 1e3, self.carrier_ghz)?;
        let rho = 10f64.powf(-(l1 + l2) / 20.0);
        Ok((self.reflect_amp * rho).powi(2))
    }

    /// Gradient of |alpha(theta)|^2:  -2 |alpha|^2 (u_t/d_t + u_r/d_r) with
    /// u the unit vectors pointing from tx/rx toward theta.
    fn alpha_sq_grad(&self, rx: [f64; 2], theta: [f64; 2]) -> Result<Vector2<f64>> {
        let a2 = self.alpha_sq(rx, theta)?;
        let d_t = dist(self.tx, theta);
        let d_r = dist(rx, theta);
        if d_t < 1e-9 || d_r < 1e-9 {
            return Err(CoopError::CoincidentGeometry);
        }
        let u = Vector2::new(
            (theta[0] - self.tx[0]) / (d_t * d_t) + (theta[0] - rx[0]) / (d_r * d_r),
            (theta[1] - self.tx[1]) / (d_t * d_t) + (theta[1] - rx[1]) / (d_r * d_r),
        );
        Ok(u * (-2.0 * a2))
    }
}

/// TOA + RSS information-domain localization. The RSS residual compares
/// |alpha-hat|^2 with the path-loss model power, weighted by the delta-method
/// variance 4 |alpha-hat|^2 (CRLB_alpha / 2).
pub fn baseline_toa_rss_idcs(
    estimates: &[LocalEstimate],
    rx_pos: &[[f64; 2]],
    model: RssModel,
    region: &TargetRegion,
    opts: &LocalizeOptions,
) -> Result<PositionEstimate> {
    if estimates.len() < 2 {
        return Err(CoopError::TooFewReceivers {
            need: 2,
            got: estimates.len(),
        });
    }
    let tx = model.tx;
    let objective = |theta: [f64; 2]| -> f64 {
        let mut cost = 0.0;
        for est in estimates {
            let rx = rx_pos[est.receiver_id];
            let tau = (dist(tx, theta) + dist(rx, theta)) / SPEED_OF_LIGHT;
            cost += (est.tau_hat - tau).powi(2) / est.crlb_tau;
            if let Ok(a2) = model.alpha_sq(rx, theta) {
                let var = 4.0 * est.alpha_hat.norm_sqr() * (est.crlb_alpha / 2.0);
                cost += (est.alpha_hat.norm_sqr() - a2).powi(2) / var;
            }
        }
        -cost
    };
    let grad_hess = |theta: [f64; 2]| -> (Vector2<f64>, Matrix2<f64>) {
        let mut g = Vector2::zeros();
        let mut h = Matrix2::zeros();
        for est in estimates {
            let rx = rx_pos[est.receiver_id];
            let tau = (dist(tx, theta) + dist(rx, theta)) / SPEED_OF_LIGHT;
            if let Ok(dt) = delay_gradient(theta, tx, rx) {
                let wgt = 2.0 / est.crlb_tau;
                g += dt * (wgt * (est.tau_hat - tau));
                h += dt * dt.transpose() * wgt;
            }
            if let (Ok(a2), Ok(da2)) = (model.alpha_sq(rx, theta), model.alpha_sq_grad(rx, theta)) {
                let var = 4.0 * est.alpha_hat.norm_sqr() * (est.crlb_alpha / 2.0);
                let wgt = 2.0 / var;
                g += da2 * (wgt * (est.alpha_hat.norm_sqr() - a2));
                h += da2 * da2.transpose() * wgt;
            }
        }
        (g, h)
    };
    grid_then_refine(region, opts, &objective, &grad_hess)
}

/// Signal-domain baseline flavors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdcsMode {
    /// 8-bit uniform mid-rise quantization of each stacked component.
    Uniform8,
    /// Raw samples, no quantization error.
    Ideal,
}

pub const UNIFORM_SDCS_BITS: u32 = 8;

/// Builds the fusion observation for one receiver under a signal-domain
/// baseline. `raw` is the stacked window vector of actual samples.
pub fn sdcs_observation(
    mode: SdcsMode,
    est: &LocalEstimate,
    window: &SampleWindow,
    codec: &KltCodec,
    raw: &DVector<f64>,
    rx_pos: [f64; 2],
) -> FusionObservation {
    let dim = raw.len();
    match mode {
        SdcsMode::Ideal => FusionObservation {
            receiver_id: est.receiver_id,
            rx_pos,
            alpha_hat: est.alpha_hat,
            window: window.clone(),
            r_tilde: raw.clone(),
            precision: Precision::Diagonal {
                weights: DVector::from_element(dim, 2.0 / codec.sigma2),
            },
        },
        SdcsMode::Uniform8 => {
            // Mid-rise quantizer spanning +-4 sqrt(max gamma) around the
            // model mean of each component.
            let gamma_max = codec.gammas[0];
            let levels = 1u32 << UNIFORM_SDCS_BITS;
            let delta = 8.0 * gamma_max.sqrt() / levels as f64;
            let half = levels as f64 / 2.0;
            let mut r_tilde = DVector::zeros(dim);
            for j in 0..dim {
                let centered = raw[j] - codec.mean[j];
                let idx = (centered / delta).floor().clamp(-half, half - 1.0);
                r_tilde[j] = codec.mean[j] + (idx + 0.5) * delta;
            }
            let qvar = delta * delta / 12.0;
            FusionObservation {
                receiver_id: est.receiver_id,
                rx_pos,
                alpha_hat: est.alpha_hat,
                window: window.clone(),
                r_tilde,
                precision: Precision::Diagonal {
                    weights: DVector::from_element(dim, 1.0 / (codec.sigma2 / 2.0 + qvar)),
                },
            }
        }
    }
}

/// Builds the HISDCS fusion observation from a reconstructed upload.
pub fn hisdcs_observation(
    est: &LocalEstimate,
    window: &SampleWindow,
    codec: &KltCodec,
    reconstructed: DVector<f64>,
    bits: &[u32],
    eta_model: EtaModel,
    rx_pos: [f64; 2],
) -> FusionObservation {
    let weights = DVector::from_iterator(
        codec.dim(),
        (0..codec.dim()).map(|j| {
            info_weight(codec.gammas[j], codec.sigma2, bits[j] as f64, eta_model)
        }),
    );
    FusionObservation {
        receiver_id: est.receiver_id,
        rx_pos,
        alpha_hat: est.alpha_hat,
        window: window.clone(),
        r_tilde: reconstructed,
        precision: Precision::KltDiagonal {
            basis: codec.basis.clone(),
            weights,
        },
    }
}

/// Stacked raw window vector of a record.
pub fn stacked_window(window: &SampleWindow, rec: &crate::signal::EchoRecord) -> DVector<f64> {
    stack_real(&window.extract(rec))
}
