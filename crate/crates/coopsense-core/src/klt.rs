//! Window statistics, KLT basis, Lloyd quantizers and reconstruction.
//!
//! The stacked window vector collects real then imaginary parts of the
//! samples around the estimated delay. Its covariance is the sum of three
//! outer products driven by the local CRLBs plus the white-noise floor;
//! the KLT decorrelates it so each coefficient can be scalar quantized.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use statrs::function::erf::erfc;

use crate::error::{CoopError, Result};
use crate::estimator::LocalEstimate;
use crate::signal::{EchoRecord, Waveform};

/// Sample index set around the estimated delay.
///
/// Every integer k with tau_hat - T_d/2 <= k T_s <= tau_hat + T_d/2 is
/// included; when the window is at least one sample wide the two bracketing
/// samples are kept as well, which reproduces the K_n = T_d/T_s + 2 count
/// for a generic (off-grid) delay estimate.
#[derive(Debug, Clone)]
pub struct SampleWindow {
    /// 1-based sample indices, ascending.
    pub indices: Vec<usize>,
    pub window_len: f64,
}

impl SampleWindow {
    pub fn k_n(&self) -> usize {
        self.indices.len()
    }

    /// Extracts the window samples from a record.
    pub fn extract(&self, rec: &EchoRecord) -> Vec<Complex64> {
        self.indices.iter().map(|&k| rec.sample(k)).collect()
    }
}

pub fn build_window(tau_hat: f64, w: &Waveform) -> Result<SampleWindow> {
    let ts = w.sample_period;
    let half = w.window_len / 2.0;
    let lo = tau_hat - half;
    let hi = tau_hat + half;
    let (k_lo, k_hi) = if w.window_len >= ts {
        ((lo / ts).floor(), (hi / ts).ceil())
    } else {
        ((lo / ts).ceil(), (hi / ts).floor())
    };
    let k_lo = k_lo.max(1.0) as i64;
    let k_hi = k_hi.min(w.total_samples as f64) as i64;
    if k_hi < k_lo {
        return Err(CoopError::EmptyWindow);
    }
    Ok(SampleWindow {
        indices: (k_lo..=k_hi).map(|k| k as usize).collect(),
        window_len: w.window_len,
    })
}

/// Stacks complex window samples as [real parts; imaginary parts].
pub fn stack_real(samples: &[Complex64]) -> DVector<f64> {
    let k = samples.len();
    let mut v = DVector::zeros(2 * k);
    for (i, z) in samples.iter().enumerate() {
        v[i] = z.re;
        v[k + i] = z.im;
    }
    v
}

/// Inverse of [stack_real].
pub fn unstack(v: &DVector<f64>) -> Vec<Complex64> {
    let k = v.len() / 2;
    (0..k).map(|i| Complex64::new(v[i], v[k + i])).collect()
}

/// KLT basis, eigenvalues and prior mean for one receiver's window vector.
#[derive(Debug, Clone)]
pub struct KltCodec {
    /// Prior mean of the stacked window, sqrt(E) h.
    pub mean: DVector<f64>,
    /// Prior mean in the transform domain, U^T mean.
    pub mean_coeffs: DVector<f64>,
    /// Orthogonal KLT basis U (columns are eigenvectors).
    pub basis: DMatrix<f64>,
    /// Eigenvalues, descending.
    pub gammas: DVector<f64>,
    /// The window covariance Q itself.
    pub covariance: DMatrix<f64>,
    /// Receiver noise power sigma^2.
    pub sigma2: f64,
}

impl KltCodec {
    /// Transform-domain coefficients U^T r.
    pub fn transform(&self, r: &DVector<f64>) -> DVector<f64> {
        self.basis.transpose() * r
    }

    pub fn dim(&self) -> usize {
        self.gammas.len()
    }
}

/// The three structure vectors and the mean direction of the window model.
pub(crate) struct WindowVectors {
    pub p: DVector<f64>,
    pub q1: DVector<f64>,
    pub q2: DVector<f64>,
    pub h: DVector<f64>,
}

pub(crate) fn window_vectors(
    est: &LocalEstimate,
    win: &SampleWindow,
    w: &Waveform,
) -> WindowVectors {
    let k_n = win.k_n();
    let mut p = DVector::zeros(2 * k_n);
    let mut q1 = DVector::zeros(2 * k_n);
    let mut q2 = DVector::zeros(2 * k_n);
    let mut h = DVector::zeros(2 * k_n);
    for (i, &k) in win.indices.iter().enumerate() {
        let dt = k as f64 * w.sample_period - est.tau_hat;
        let sv = w.pulse(dt);
        let sd = w.pulse_deriv(dt);
        // s(t) is real, so Re(alpha s) = Re(alpha) s and Im(alpha s) = Im(alpha) s.
        p[i] = est.alpha_hat.re * sd;
        p[k_n + i] = est.alpha_hat.im * sd;
        q1[i] = sv;
        q2[k_n + i] = sv;
        h[i] = est.alpha_hat.re * sv;
        h[k_n + i] = est.alpha_hat.im * sv;
    }
    WindowVectors { p, q1, q2, h }
}

/// Assembles the window covariance, its mean and the KLT eigendecomposition.
///
/// Q = E crlb_tau p p^T + E (crlb_alpha/2) (q1 q1^T + q2 q2^T) + (sigma^2/2) I.
pub fn window_covariance(
    est: &LocalEstimate,
    win: &SampleWindow,
    w: &Waveform,
    e: f64,
    sigma2: f64,
) -> Result<KltCodec> {
    let vecs = window_vectors(est, win, w);
    let dim = vecs.p.len();
    let mut q = DMatrix::from_diagonal_element(dim, dim, sigma2 / 2.0);
    rank_one_update(&mut q, &vecs.p, e * est.crlb_tau);
    rank_one_update(&mut q, &vecs.q1, e * est.crlb_alpha / 2.0);
    rank_one_update(&mut q, &vecs.q2, e * est.crlb_alpha / 2.0);
    let mean = &vecs.h * e.sqrt();

    if q.iter().any(|v| !v.is_finite()) {
        return Err(CoopError::EigenFailure);
    }
    let eig = nalgebra::SymmetricEigen::new(q.clone());
    let (basis, mut gammas) = order_eigenpairs(eig.eigenvectors, eig.eigenvalues);
    // Q is a PSD sum plus (sigma^2/2) I, so sigma^2/2 bounds every eigenvalue
    // from below exactly; clamp out eigensolver round-off at large dynamic
    // ranges (it would otherwise leak into quantizer variances).
    let floor = sigma2 / 2.0;
    for g in gammas.iter_mut() {
        if *g < floor {
            *g = floor;
        }
    }
    let mean_coeffs = basis.transpose() * &mean;
    Ok(KltCodec {
        mean,
        mean_coeffs,
        basis,
        gammas,
        covariance: q,
        sigma2,
    })
}

fn rank_one_update(q: &mut DMatrix<f64>, v: &DVector<f64>, scale: f64) {
    let n = v.len();
    for i in 0..n {
        for j in 0..n {
            q[(i, j)] += scale * v[i] * v[j];
        }
    }
}

/// Descending eigenvalue order with a deterministic sign convention (first
/// significantly nonzero entry of each eigenvector is positive). Degenerate
/// eigenvalues are ordered by the row index of their largest-magnitude entry.
fn order_eigenpairs(vectors: DMatrix<f64>, values: DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = values.len();
    let scale = values.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let mut idx: Vec<usize> = (0..n).collect();
    let peak_row = |col: usize| -> usize {
        let mut best = 0;
        let mut best_mag = -1.0;
        for r in 0..n {
            let m = vectors[(r, col)].abs();
            if m > best_mag {
                best_mag = m;
                best = r;
            }
        }
        best
    };
    idx.sort_by(|&a, &b| {
        let (ga, gb) = (values[a], values[b]);
        if (ga - gb).abs() <= 1e-12 * scale {
            peak_row(a).cmp(&peak_row(b))
        } else {
            gb.partial_cmp(&ga).unwrap()
        }
    });
    let mut basis = DMatrix::zeros(n, n);
    let mut gammas = DVector::zeros(n);
    for (out, &src) in idx.iter().enumerate() {
        gammas[out] = values[src];
        let col = vectors.column(src);
        let norm = col.norm();
        let mut sign = 1.0;
        for r in 0..n {
            if col[r].abs() > 1e-12 * norm {
                sign = col[r].signum();
                break;
            }
        }
        for r in 0..n {
            basis[(r, out)] = sign * col[r];
        }
    }
    (basis, gammas)
}

/// Which quantization-error variance law to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaModel {
    /// eta = gamma / 2^{2X - 1}; finite (2 gamma) at X = 0.
    #[default]
    PaperHalfBit,
    /// eta = gamma / (2^{2X} - 1); infinite at X = 0.
    RateDistortionExact,
}

/// Quantization error variance for one transform coefficient.
pub fn quantization_noise_variance(gamma: f64, bits: u32, model: EtaModel) -> f64 {
    let x = bits as f64;
    match model {
        EtaModel::PaperHalfBit => gamma / 2f64.powf(2.0 * x - 1.0),
        EtaModel::RateDistortionExact => {
            let denom = 2f64.powf(2.0 * x) - 1.0;
            if denom <= 0.0 {
                f64::INFINITY
            } else {
                gamma / denom
            }
        }
    }
}

/// Lloyd-Max scalar quantizer for a Gaussian source N(mean, var).
#[derive(Debug, Clone)]
pub struct LloydCodebook {
    pub bits: u32,
    /// Reconstruction levels, ascending.
    pub levels: Vec<f64>,
    /// Nearest-neighbor cell edges (midpoints of adjacent levels).
    pub thresholds: Vec<f64>,
    /// Expected squared error under the source density.
    pub mse: f64,
    pub mean: f64,
    pub var: f64,
}

impl LloydCodebook {
    pub fn encode(&self, v: f64) -> u32 {
        self.thresholds.partition_point(|&t| t < v) as u32
    }

    pub fn decode(&self, code: u32) -> f64 {
        self.levels[code as usize]
    }
}

struct StdCodebook {
    levels: Vec<f64>,
    mse: f64,
}

fn std_phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Upper-tail probability Q(x), accurate for large |x|.
fn std_q(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// P(a < Z < b) without cancellation in the tails.
fn std_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        (std_q(a) - std_q(b)).max(0.0)
    } else if b <= 0.0 {
        (std_q(-b) - std_q(-a)).max(0.0)
    } else {
        (1.0 - std_q(b) - std_q(-a)).max(0.0)
    }
}

const LLOYD_MAX_ITERS: usize = 10_000;
const LLOYD_TOL: f64 = 1e-10;

/// One centroid sweep: residual F_i = centroid_i(levels) - level_i and the
/// tridiagonal Jacobian bands of the centroid map.
fn centroid_residual(
    levels: &[f64],
    residual: &mut [f64],
    lower: &mut [f64],
    diag: &mut [f64],
    upper: &mut [f64],
) -> f64 {
    let l = levels.len();
    let mut movement: f64 = 0.0;
    for i in 0..l {
        let a = if i == 0 {
            f64::NEG_INFINITY
        } else {
            0.5 * (levels[i - 1] + levels[i])
        };
        let b = if i == l - 1 {
            f64::INFINITY
        } else {
            0.5 * (levels[i] + levels[i + 1])
        };
        let mass = std_mass(a, b);
        let (c, da, db) = if mass > 1e-300 {
            let c = (phi_or_zero(a) - phi_or_zero(b)) / mass;
            // d centroid / d cell-edge, from d(phi)/dx = -x phi and d(mass).
            let da = if a.is_finite() {
                std_phi(a) * (c - a) / mass
            } else {
                0.0
            };
            let db = if b.is_finite() {
                std_phi(b) * (b - c) / mass
            } else {
                0.0
            };
            (c, da, db)
        } else {
            // Vanishing far-tail cell: treat the level as already stationary.
            (levels[i], 0.0, 0.0)
        };
        residual[i] = c - levels[i];
        movement = movement.max(residual[i].abs());
        lower[i] = 0.5 * da;
        diag[i] = 0.5 * (da + db);
        upper[i] = 0.5 * db;
    }
    movement
}

/// Solves (I - C') delta = residual with C' the tridiagonal centroid Jacobian.
fn solve_newton_step(
    residual: &[f64],
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    delta: &mut [f64],
) -> bool {
    let n = residual.len();
    let mut c_prime = vec![0.0; n];
    let mut d_prime = vec![0.0; n];
    // Rows of I - C': sub = -lower[i], diag = 1 - diag[i], super = -upper[i].
    let mut den = 1.0 - diag[0];
    if den.abs() < 1e-14 {
        return false;
    }
    c_prime[0] = -upper[0] / den;
    d_prime[0] = residual[0] / den;
    for i in 1..n {
        den = (1.0 - diag[i]) + lower[i] * c_prime[i - 1];
        if den.abs() < 1e-14 {
            return false;
        }
        c_prime[i] = -upper[i] / den;
        d_prime[i] = (residual[i] + lower[i] * d_prime[i - 1]) / den;
    }
    delta[n - 1] = d_prime[n - 1];
    for i in (0..n - 1).rev() {
        delta[i] = d_prime[i] - c_prime[i] * delta[i + 1];
    }
    true
}

fn is_strictly_increasing(levels: &[f64]) -> bool {
    levels.windows(2).all(|w| w[1] > w[0] && w[0].is_finite() && w[1].is_finite())
}

/// Builds the standard-normal Lloyd-Max codebook.
///
/// Levels start at the asymptotically optimal phi^{1/3} point density
/// (percentiles of N(0, 3)) and the centroid/threshold stationarity system
/// is solved by damped Newton steps on the centroid residual, falling back
/// to plain centroid sweeps when a step is rejected. The fixed point is
/// unique for a log-concave source, so the path there only affects speed;
/// convergence is declared when one full centroid update would move no
/// level by more than the tolerance.
fn build_std_codebook(bits: u32) -> Result<StdCodebook> {
    let l = 1usize << bits;
    let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
    let mut levels: Vec<f64> = (0..l)
        .map(|i| {
            let p = (i as f64 + 0.5) / l as f64;
            3f64.sqrt() * statrs::distribution::ContinuousCDF::inverse_cdf(&normal, p)
        })
        .collect();
    let mut residual = vec![0.0; l];
    let mut lower = vec![0.0; l];
    let mut diag = vec![0.0; l];
    let mut upper = vec![0.0; l];
    let mut delta = vec![0.0; l];
    let mut converged = false;
    for _ in 0..LLOYD_MAX_ITERS {
        let movement = centroid_residual(&levels, &mut residual, &mut lower, &mut diag, &mut upper);
        if movement < LLOYD_TOL {
            converged = true;
            break;
        }
        let mut stepped = false;
        if solve_newton_step(&residual, &lower, &diag, &upper, &mut delta) {
            let mut t = 1.0;
            for _ in 0..30 {
                let trial: Vec<f64> = levels
                    .iter()
                    .zip(delta.iter())
                    .map(|(lv, dv)| lv + t * dv)
                    .collect();
                if is_strictly_increasing(&trial) {
                    let new_move = centroid_residual(
                        &trial,
                        &mut residual,
                        &mut lower,
                        &mut diag,
                        &mut upper,
                    );
                    if new_move < movement {
                        levels = trial;
                        stepped = true;
                        break;
                    }
                }
                t *= 0.5;
            }
        }
        if !stepped {
            // Plain Lloyd sweep: levels move to their cell centroids.
            centroid_residual(&levels, &mut residual, &mut lower, &mut diag, &mut upper);
            for i in 0..l {
                levels[i] += residual[i];
            }
        }
    }
    if !converged {
        return Err(CoopError::LloydNonConvergence(LLOYD_MAX_ITERS));
    }
    // Analytic in-cell second moments give the codebook distortion.
    let mut mse = 0.0;
    for i in 0..l {
        let a = if i == 0 {
            f64::NEG_INFINITY
        } else {
            0.5 * (levels[i - 1] + levels[i])
        };
        let b = if i == l - 1 {
            f64::INFINITY
        } else {
            0.5 * (levels[i] + levels[i + 1])
        };
        let mass = std_mass(a, b);
        let m1 = phi_or_zero(a) - phi_or_zero(b);
        let m2 = mass + xphi_or_zero(a) - xphi_or_zero(b);
        mse += m2 - 2.0 * levels[i] * m1 + levels[i] * levels[i] * mass;
    }
    Ok(StdCodebook { levels, mse })
}

fn phi_or_zero(x: f64) -> f64 {
    if x.is_finite() {
        std_phi(x)
    } else {
        0.0
    }
}

fn xphi_or_zero(x: f64) -> f64 {
    if x.is_finite() {
        x * std_phi(x)
    } else {
        0.0
    }
}

fn codebook_cache() -> &'static RwLock<HashMap<u32, Arc<StdCodebook>>> {
    static CACHE: OnceLock<RwLock<HashMap<u32, Arc<StdCodebook>>>> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

fn std_codebook(bits: u32) -> Result<Arc<StdCodebook>> {
    if let Some(cb) = codebook_cache().read().unwrap().get(&bits) {
        return Ok(cb.clone());
    }
    let built = Arc::new(build_std_codebook(bits)?);
    let mut guard = codebook_cache().write().unwrap();
    Ok(guard.entry(bits).or_insert(built).clone())
}

/// Lloyd-Max codebook for N(mean, var); standard-normal codebooks are cached
/// and shifted/scaled by translation equivariance.
pub fn lloyd_codebook(bits: u32, mean: f64, var: f64) -> Result<LloydCodebook> {
    if bits == 0 || !(var > 0.0) {
        return Err(CoopError::InvalidQuantizer);
    }
    let std = std_codebook(bits)?;
    let sd = var.sqrt();
    let levels: Vec<f64> = std.levels.iter().map(|l| mean + sd * l).collect();
    let thresholds: Vec<f64> = levels.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    Ok(LloydCodebook {
        bits,
        levels,
        thresholds,
        mse: std.mse * var,
        mean,
        var,
    })
}

/// Quantized transform coefficients of one window.
#[derive(Debug, Clone)]
pub struct QuantizedWindow {
    pub codes: Vec<u32>,
    /// Dequantized coefficients r~_nC.
    pub dequantized: DVector<f64>,
    pub bits: Vec<u32>,
}

/// Encodes each transform coefficient with its allocated bit count; a
/// zero-bit coefficient is replaced by its prior mean.
pub fn quantize_window(
    r_nc: &DVector<f64>,
    codec: &KltCodec,
    bits: &[u32],
) -> Result<QuantizedWindow> {
    let dim = codec.dim();
    assert_eq!(r_nc.len(), dim);
    assert_eq!(bits.len(), dim);
    let mut codes = vec![0u32; dim];
    let mut deq = DVector::zeros(dim);
    for j in 0..dim {
        if bits[j] == 0 {
            deq[j] = codec.mean_coeffs[j];
        } else {
            let cb = lloyd_codebook(bits[j], codec.mean_coeffs[j], codec.gammas[j])?;
            let code = cb.encode(r_nc[j]);
            codes[j] = code;
            deq[j] = cb.decode(code);
        }
    }
    Ok(QuantizedWindow {
        codes,
        dequantized: deq,
        bits: bits.to_vec(),
    })
}

/// Signal reconstruction and its modeled error covariance.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// r~_n = U r~_nC.
    pub signal: DVector<f64>,
    /// Q_n = U diag(eta) U^T.
    pub error_cov: DMatrix<f64>,
    pub etas: DVector<f64>,
}

pub fn reconstruct(codec: &KltCodec, quantized: &QuantizedWindow, model: EtaModel) -> Reconstruction {
    let signal = &codec.basis * &quantized.dequantized;
    let dim = codec.dim();
    let etas = DVector::from_iterator(
        dim,
        (0..dim).map(|j| quantization_noise_variance(codec.gammas[j], quantized.bits[j], model)),
    );
    let mut error_cov = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        if etas[j].is_finite() {
            let col = codec.basis.column(j);
            for a in 0..dim {
                for b in 0..dim {
                    error_cov[(a, b)] += etas[j] * col[a] * col[b];
                }
            }
        }
    }
    Reconstruction {
        signal,
        error_cov,
        etas,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn wf() -> Waveform {
        // Paper-style configuration: T = 2e-8, Ts = 1e-8, Td = 4T.
        Waveform::new(2e-8, 3.55e9, 5e7, 1e-8, 200, 8e-8).unwrap()
    }

    #[test]
    fn window_counts_match_boundary_cases() {
        let w = wf();
        // Aligned tau: exactly the closed-interval indices, |k Ts - tau| <= Td/2.
        let win = build_window(5e-7, &w).unwrap();
        assert_eq!(win.k_n(), 9);
        for &k in &win.indices {
            assert!((k as f64 * w.sample_period - 5e-7).abs() <= 4e-8 + 1e-20);
        }
        // Generic tau reproduces the Td/Ts + 2 = 10 count.
        let win = build_window(5.037e-7, &w).unwrap();
        assert_eq!(win.k_n(), 10);
        // Every closed-interval index is present in either case.
        for &k in &[46usize, 47, 48, 49, 50, 51, 52, 53, 54] {
            assert!(win.indices.contains(&k));
        }
    }

    #[test]
    fn narrow_window_has_at_most_one_index() {
        let w = Waveform::new(4e-9, 3.55e9, 5e7, 1e-8, 200, 5e-9).unwrap();
        let win = build_window(5e-7, &w).unwrap();
        assert!(win.k_n() <= 1);
    }

    #[test]
    fn stack_real_layout_and_isometry() {
        let samples = vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(2.0, 0.0),
            Complex64::new(-3.0, 0.0),
        ];
        let v = stack_real(&samples);
        assert_eq!(v.as_slice()[3..], [0.0, 0.0, 0.0]);

        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let samples: Vec<Complex64> = (0..8)
            .map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
            .collect();
        let v = stack_real(&samples);
        let e_complex: f64 = samples.iter().map(|z| z.norm_sqr()).sum();
        assert_relative_eq!(v.norm_squared(), e_complex, max_relative = 1e-12);
        let back = unstack(&v);
        assert_eq!(back, samples);
    }

    fn estimate_for(alpha: Complex64, tau: f64, crlb_tau: f64, crlb_alpha: f64) -> LocalEstimate {
        LocalEstimate {
            tau_hat: tau,
            alpha_hat: alpha,
            crlb_tau,
            crlb_alpha,
            receiver_id: 0,
        }
    }

    #[test]
    fn noise_only_covariance_is_scaled_identity() {
        let w = wf();
        let est = estimate_for(Complex64::new(1.0, 0.5), 5.03e-7, 0.0, 0.0);
        let win = build_window(est.tau_hat, &w).unwrap();
        let sigma2 = 0.8;
        let codec = window_covariance(&est, &win, &w, 1.0, sigma2).unwrap();
        for j in 0..codec.dim() {
            assert_relative_eq!(codec.gammas[j], sigma2 / 2.0, max_relative = 1e-12);
        }
        // Identity covariance: the deterministic ordering yields U = I.
        let dim = codec.dim();
        let ident = DMatrix::<f64>::identity(dim, dim);
        assert!((codec.basis.clone() - ident).norm() < 1e-9);
    }

    #[test]
    fn covariance_reduced_rank_and_floor() {
        let w = wf();
        let est = estimate_for(Complex64::new(0.9, -0.3), 5.031e-7, 2e-17, 1e-3);
        let win = build_window(est.tau_hat, &w).unwrap();
        let sigma2 = 0.5;
        let codec = window_covariance(&est, &win, &w, 1.3, sigma2).unwrap();
        // Q - (sigma^2/2) I has rank <= 3.
        let dim = codec.dim();
        let stripped = codec.covariance.clone() - DMatrix::from_diagonal_element(dim, dim, sigma2 / 2.0);
        let scale = stripped.norm();
        let eig = nalgebra::SymmetricEigen::new(stripped);
        let big = eig
            .eigenvalues
            .iter()
            .filter(|v| v.abs() > 1e-10 * scale)
            .count();
        assert!(big <= 3, "rank {big}");
        // Eigenvalue floor.
        for j in 0..dim {
            assert!(codec.gammas[j] >= sigma2 / 2.0 - 1e-9);
        }
        // U orthogonal and reconstructs Q.
        let utu = codec.basis.transpose() * &codec.basis;
        assert!((utu - DMatrix::<f64>::identity(dim, dim)).norm() < 1e-9);
        let rebuilt = &codec.basis
            * DMatrix::from_diagonal(&codec.gammas)
            * codec.basis.transpose();
        let rel = (rebuilt - &codec.covariance).norm() / codec.covariance.norm();
        assert!(rel < 1e-8, "frobenius rel {rel}");
    }

    #[test]
    fn covariance_matches_linearized_sampling_oracle() {
        // Draw 1e5 samples of the first-order model
        //   r = sqrt(E) w_tau p - sqrt(E) Re(w_a) q1 - sqrt(E) Im(w_a) q2
        //       + sqrt(E) h + noise
        // and compare the empirical covariance against Q.
        let w = wf();
        let est = estimate_for(Complex64::new(1.0, 0.4), 5.029e-7, 0.0, 0.0);
        let win = build_window(est.tau_hat, &w).unwrap();
        let k_n = win.k_n();
        let e = 1.7;
        let sigma2 = 0.35;
        let crlb_tau = 4e-18;
        let crlb_alpha = 0.02;
        let est = LocalEstimate {
            crlb_tau,
            crlb_alpha,
            ..est
        };
        let codec = window_covariance(&est, &win, &w, e, sigma2).unwrap();

        // Oracle vectors rebuilt directly from the pulse closed forms.
        let mut p = DVector::zeros(2 * k_n);
        let mut q1 = DVector::zeros(2 * k_n);
        let mut q2 = DVector::zeros(2 * k_n);
        for (i, &k) in win.indices.iter().enumerate() {
            let dt = k as f64 * w.sample_period - est.tau_hat;
            p[i] = est.alpha_hat.re * w.pulse_deriv(dt);
            p[k_n + i] = est.alpha_hat.im * w.pulse_deriv(dt);
            q1[i] = w.pulse(dt);
            q2[k_n + i] = w.pulse(dt);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let draws = 100_000;
        let dim = 2 * k_n;
        let mut acc = DMatrix::<f64>::zeros(dim, dim);
        let se = e.sqrt();
        for _ in 0..draws {
            let w_tau: f64 = rng.sample::<f64, _>(StandardNormal) * crlb_tau.sqrt();
            let wa_re: f64 = rng.sample::<f64, _>(StandardNormal) * (crlb_alpha / 2.0).sqrt();
            let wa_im: f64 = rng.sample::<f64, _>(StandardNormal) * (crlb_alpha / 2.0).sqrt();
            let mut r = &p * (se * w_tau) - &q1 * (se * wa_re) - &q2 * (se * wa_im);
            for i in 0..dim {
                r[i] += rng.sample::<f64, _>(StandardNormal) * (sigma2 / 2.0).sqrt();
            }
            for a in 0..dim {
                for b in 0..dim {
                    acc[(a, b)] += r[a] * r[b];
                }
            }
        }
        let emp = acc / draws as f64;
        let rel = (emp - &codec.covariance).norm() / codec.covariance.norm();
        assert!(rel < 0.05, "frobenius rel {rel}");
    }

    #[test]
    fn klt_decorrelates_transformed_draws() {
        let w = wf();
        let est = estimate_for(Complex64::new(0.8, -0.6), 5.041e-7, 3e-18, 0.015);
        let win = build_window(est.tau_hat, &w).unwrap();
        let codec = window_covariance(&est, &win, &w, 1.0, 0.4).unwrap();
        // Transform-domain covariance should be diag(gamma).
        let cov_c = codec.basis.transpose() * &codec.covariance * &codec.basis;
        let mut off = 0.0f64;
        let mut diag = 0.0f64;
        for a in 0..codec.dim() {
            for b in 0..codec.dim() {
                if a == b {
                    diag += cov_c[(a, b)].abs();
                } else {
                    off = off.max(cov_c[(a, b)].abs());
                }
            }
        }
        let mean_diag = diag / codec.dim() as f64;
        assert!(off / mean_diag < 0.05, "off {off} diag {mean_diag}");
    }

    #[test]
    fn eta_formula_values() {
        assert_relative_eq!(
            quantization_noise_variance(3.0, 1, EtaModel::PaperHalfBit),
            1.5
        );
        assert_relative_eq!(
            quantization_noise_variance(1.0, 2, EtaModel::PaperHalfBit),
            0.125
        );
        assert_relative_eq!(
            quantization_noise_variance(5.0, 0, EtaModel::PaperHalfBit),
            10.0
        );
        // Monotone to zero.
        let mut last = f64::INFINITY;
        for x in 0..30 {
            let eta = quantization_noise_variance(1.0, x, EtaModel::PaperHalfBit);
            assert!(eta < last);
            last = eta;
        }
        assert!(last < 1e-15);
        assert!(quantization_noise_variance(1.0, 0, EtaModel::RateDistortionExact).is_infinite());
        assert_relative_eq!(
            quantization_noise_variance(3.0, 1, EtaModel::RateDistortionExact),
            1.0
        );
    }

    #[test]
    fn mutual_information_never_exceeds_rate_plus_half() {
        // (1/2) log2((eta + gamma)/eta) at eta = gamma/2^{2X-1} equals
        // (1/2) log2(1 + 2^{2X-1}) <= X + 0.5 — documents the paper-formula gap.
        for x in 1..=32u32 {
            let gamma = 1.0;
            let eta = quantization_noise_variance(gamma, x, EtaModel::PaperHalfBit);
            let mi = 0.5 * ((eta + gamma) / eta).log2();
            assert!(mi <= x as f64 + 0.5 + 1e-12, "x={x} mi={mi}");
        }
    }

    #[test]
    fn lloyd_one_and_two_bit_classics() {
        let cb = lloyd_codebook(1, 0.0, 1.0).unwrap();
        let level = (2.0 / std::f64::consts::PI).sqrt();
        assert_relative_eq!(cb.levels[0], -level, max_relative = 1e-6);
        assert_relative_eq!(cb.levels[1], level, max_relative = 1e-6);
        assert_relative_eq!(cb.mse, 1.0 - 2.0 / std::f64::consts::PI, max_relative = 1e-6);

        let cb = lloyd_codebook(2, 0.0, 1.0).unwrap();
        assert_relative_eq!(cb.mse, 0.117_443, max_relative = 1e-3);
    }

    #[test]
    fn lloyd_mean_shift_equivariance() {
        let base = lloyd_codebook(3, 0.0, 2.0).unwrap();
        let shifted = lloyd_codebook(3, 5.0, 2.0).unwrap();
        for (a, b) in base.levels.iter().zip(shifted.levels.iter()) {
            assert_relative_eq!(a + 5.0, *b, max_relative = 1e-12);
        }
        assert_relative_eq!(base.mse, shifted.mse, max_relative = 1e-12);
    }

    #[test]
    fn lloyd_rejects_bad_input() {
        assert!(lloyd_codebook(0, 0.0, 1.0).is_err());
        assert!(lloyd_codebook(2, 0.0, 0.0).is_err());
    }

    #[test]
    fn lloyd_high_rate_converges() {
        let cb = lloyd_codebook(16, 0.0, 1.0).unwrap();
        assert_eq!(cb.levels.len(), 1 << 16);
        // Distortion close to the Panter-Dite high-rate law (pi sqrt(3)/2) 2^{-2X}.
        let pd = std::f64::consts::PI * 3f64.sqrt() / 2.0 * 2f64.powi(-32);
        assert!((cb.mse - pd).abs() / pd < 0.05, "mse {} vs {}", cb.mse, pd);
    }

    fn codec_for_tests() -> KltCodec {
        let w = wf();
        let est = estimate_for(Complex64::new(1.0, 0.2), 5.032e-7, 3e-18, 0.02);
        let win = build_window(est.tau_hat, &w).unwrap();
        window_covariance(&est, &win, &w, 1.0, 0.5).unwrap()
    }

    #[test]
    fn zero_rate_emits_the_prior_mean() {
        let codec = codec_for_tests();
        let dim = codec.dim();
        let r_nc = DVector::from_element(dim, 3.0);
        let bits = vec![0u32; dim];
        let qw = quantize_window(&r_nc, &codec, &bits).unwrap();
        assert!((qw.dequantized.clone() - &codec.mean_coeffs).norm() < 1e-12);
        // Reconstruction maps back to the original-domain mean.
        let rec = reconstruct(&codec, &qw, EtaModel::PaperHalfBit);
        assert!((rec.signal.clone() - &codec.mean).norm() < 1e-9);
    }

    #[test]
    fn high_rate_reconstruction_is_tight() {
        let codec = codec_for_tests();
        let dim = codec.dim();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        // Draw from the model: independent coefficients with variance gamma_j.
        let mut coeff_noise = DVector::zeros(dim);
        for i in 0..dim {
            coeff_noise[i] = rng.sample::<f64, _>(StandardNormal) * codec.gammas[i].sqrt();
        }
        let r = codec.mean.clone() + &codec.basis * coeff_noise;
        let r_nc = codec.transform(&r);
        let bits = vec![16u32; dim];
        let qw = quantize_window(&r_nc, &codec, &bits).unwrap();
        let rec = reconstruct(&codec, &qw, EtaModel::PaperHalfBit);
        let max_sd = codec.gammas[0].sqrt();
        let sup = (rec.signal.clone() - &r).amax();
        assert!(sup <= 1e-3 * max_sd, "sup {sup} vs {}", 1e-3 * max_sd);
    }

    #[test]
    fn empirical_distortion_tracks_model() {
        // Per-coefficient distortion vs both the codebook MSE (tight) and the
        // paper's eta law (loose: the model is a bound, and the true Lloyd
        // distortion sits 6-28% away depending on the rate).
        let gamma = 0.7;
        let mean = -1.3;
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for bits in [1u32, 2, 3] {
            let cb = lloyd_codebook(bits, mean, gamma).unwrap();
            let eta = quantization_noise_variance(gamma, bits, EtaModel::PaperHalfBit);
            let draws = 10_000;
            let mut acc = 0.0;
            for _ in 0..draws {
                let v = mean + rng.sample::<f64, _>(StandardNormal) * gamma.sqrt();
                let err = v - cb.decode(cb.encode(v));
                acc += err * err;
            }
            let emp = acc / draws as f64;
            let dev_cb = (emp - cb.mse).abs() / cb.mse;
            assert!(dev_cb < 0.08, "bits {bits}: emp {emp} vs codebook {}", cb.mse);
            let dev_eta = (emp - eta).abs() / eta;
            assert!(dev_eta < 0.30, "bits {bits}: emp {emp} vs eta {eta}");
        }
    }

    #[test]
    fn reconstruct_trace_and_psd() {
        let codec = codec_for_tests();
        let dim = codec.dim();
        let r_nc = codec.mean_coeffs.clone();
        let mut bits = vec![0u32; dim];
        bits[0] = 3;
        bits[1] = 1;
        bits[dim - 1] = 2;
        let qw = quantize_window(&r_nc, &codec, &bits).unwrap();
        let rec = reconstruct(&codec, &qw, EtaModel::PaperHalfBit);
        let tr: f64 = (0..dim).map(|i| rec.error_cov[(i, i)]).sum();
        let eta_sum: f64 = rec.etas.iter().sum();
        assert_relative_eq!(tr, eta_sum, max_relative = 1e-10);
        let eig = nalgebra::SymmetricEigen::new(rec.error_cov.clone());
        assert!(eig.eigenvalues.iter().all(|&v| v > -1e-10));
    }

    #[test]
    fn quantize_reconstruct_deterministic() {
        let codec = codec_for_tests();
        let dim = codec.dim();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let r_nc = DVector::from_iterator(
            dim,
            (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        let bits: Vec<u32> = (0..dim).map(|i| (i % 4) as u32).collect();
        let a = quantize_window(&r_nc, &codec, &bits).unwrap();
        let b = quantize_window(&r_nc, &codec, &bits).unwrap();
        assert_eq!(a.codes, b.codes);
        assert_eq!(a.dequantized, b.dequantized);
    }
}
