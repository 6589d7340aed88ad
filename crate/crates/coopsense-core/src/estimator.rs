//! Per-receiver ML estimation of the echo delay and effective reflecting
//! coefficient, with the corresponding CRLBs.
//!
//! The delay estimator maximizes the matched-filter objective obtained by
//! substituting the closed-form alpha estimate into the log-likelihood; the
//! constant noise scaling is dropped since it does not move the argmax.

use num_complex::Complex64;

use crate::error::{CoopError, Result};
use crate::signal::{EchoRecord, Waveform};

/// Golden-section refinement resolution for the delay search, in seconds.
pub const DELAY_RESOLUTION: f64 = 1e-12;

/// Coarse grid step as a fraction of the sampling period.
pub const COARSE_STEP_FRACTION: f64 = 0.25;

/// Local estimate of (tau, alpha) at one receiver plus their CRLBs.
#[derive(Debug, Clone)]
pub struct LocalEstimate {
    pub tau_hat: f64,
    pub alpha_hat: Complex64,
    /// Var lower bound of tau-hat, seconds^2.
    pub crlb_tau: f64,
    /// Var of the complex alpha-hat error (real scalar).
    pub crlb_alpha: f64,
    pub receiver_id: usize,
}

/// Closed delay-search interval.
#[derive(Debug, Clone, Copy)]
pub struct DelaySearch {
    pub tau_min: f64,
    pub tau_max: f64,
}

fn pulse_energy(w: &Waveform, tau: f64) -> f64 {
    let mut acc = 0.0;
    for k in w.support_indices(tau) {
        acc += w.pulse(k as f64 * w.sample_period - tau).powi(2);
    }
    acc
}

fn deriv_energy(w: &Waveform, tau: f64) -> f64 {
    let mut acc = 0.0;
    for k in w.support_indices(tau) {
        acc += w.pulse_deriv(k as f64 * w.sample_period - tau).powi(2);
    }
    acc
}

fn correlate(rec: &EchoRecord, w: &Waveform, tau: f64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for k in w.support_indices(tau) {
        acc += rec.sample(k) * w.pulse(k as f64 * w.sample_period - tau);
    }
    acc
}

/// Closed-form alpha given tau: sum_k r_k s(kT_s - tau) / (sqrt(E) sum_k s^2).
pub fn estimate_alpha_given_tau(
    rec: &EchoRecord,
    tau: f64,
    w: &Waveform,
    e: f64,
) -> Result<Complex64> {
    let denom = pulse_energy(w, tau);
    if denom <= 1e-300 {
        return Err(CoopError::DegenerateWindow);
    }
    Ok(correlate(rec, w, tau) / (e.sqrt() * denom))
}

/// Matched-filter search objective: |sum_k r_k s(kT_s - tau)|^2 / sum_k s^2.
///
/// Exactly the negative residual of the log-likelihood after the alpha
/// substitution, up to additive and positive multiplicative constants.
pub fn delay_objective(rec: &EchoRecord, w: &Waveform, tau: f64) -> f64 {
    let denom = pulse_energy(w, tau);
    if denom <= 1e-300 {
        return 0.0;
    }
    correlate(rec, w, tau).norm_sqr() / denom
}

/// CRLB of tau-hat: 1 / ((2E/sigma^2) |alpha|^2 sum_k s'(kT_s - tau)^2).
pub fn crlb_tau(
    alpha_hat: Complex64,
    tau_hat: f64,
    sigma2: f64,
    e: f64,
    w: &Waveform,
) -> Result<f64> {
    let a2 = alpha_hat.norm_sqr();
    if a2 <= 0.0 {
        return Err(CoopError::ZeroAlpha);
    }
    let denom = deriv_energy(w, tau_hat);
    if denom <= 1e-300 {
        return Err(CoopError::DegenerateWindow);
    }
    Ok(1.0 / (2.0 * e / sigma2 * a2 * denom))
}

/// CRLB of alpha-hat: 1 / ((2E/sigma^2) sum_k s(kT_s - tau)^2).
pub fn crlb_alpha(tau_hat: f64, sigma2: f64, e: f64, w: &Waveform) -> Result<f64> {
    let denom = pulse_energy(w, tau_hat);
    if denom <= 1e-300 {
        return Err(CoopError::DegenerateWindow);
    }
    Ok(1.0 / (2.0 * e / sigma2 * denom))
}

/// Coarse grid search at T_s/4 followed by golden-section refinement.
///
/// Plateau ties resolve to the smallest tau.
pub fn estimate_delay(
    rec: &EchoRecord,
    w: &Waveform,
    e: f64,
    sigma2: f64,
    search: DelaySearch,
) -> Result<LocalEstimate> {
    if !(search.tau_max >= search.tau_min) {
        return Err(CoopError::EmptySearchInterval);
    }
    let step = w.sample_period * COARSE_STEP_FRACTION;
    let n_steps = ((search.tau_max - search.tau_min) / step).floor() as usize;
    let mut best_tau = search.tau_min;
    let mut best_obj = f64::NEG_INFINITY;
    for i in 0..=n_steps {
        let tau = search.tau_min + i as f64 * step;
        let obj = delay_objective(rec, w, tau);
        if obj > best_obj {
            best_obj = obj;
            best_tau = tau;
        }
    }
    // Refine within one coarse cell on each side.
    let lo = (best_tau - step).max(search.tau_min);
    let hi = (best_tau + step).min(search.tau_max);
    let tau_hat = golden_section_max(|t| delay_objective(rec, w, t), lo, hi, DELAY_RESOLUTION);
    // The refined point cannot do worse than the coarse winner; keep the
    // smaller tau on exact ties.
    let tau_hat = if delay_objective(rec, w, tau_hat) >= best_obj {
        tau_hat
    } else {
        best_tau
    };
    let alpha_hat = estimate_alpha_given_tau(rec, tau_hat, w, e)?;
    let crlb_t = crlb_tau(alpha_hat, tau_hat, sigma2, e, w)?;
    let crlb_a = crlb_alpha(tau_hat, sigma2, e, w)?;
    Ok(LocalEstimate {
        tau_hat,
        alpha_hat,
        crlb_tau: crlb_t,
        crlb_alpha: crlb_a,
        receiver_id: rec.receiver_id,
    })
}

/// Golden-section maximization on [lo, hi] to interval width `tol`.
pub fn golden_section_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}
