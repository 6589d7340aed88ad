//! Scene geometry, probing waveform, path loss and echo synthesis.
//!
//! One `Scene` describes a single sensing instance: a transmitter, N
//! receivers, a point target, transmit/backhaul powers and noise levels.
//! Echoes are baseband-sampled Gaussian pulses delayed by the two-hop
//! geometry and scaled by a path-loss-derived reflecting coefficient.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoopError, Result};

pub const SPEED_OF_LIGHT: f64 = 2.997_924_58e8;

/// Pulse amplitude is negligible beyond this many pulse widths from the peak.
pub const PULSE_SUPPORT: f64 = 5.0;

/// Gaussian probing pulse and the receiver sampling grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Waveform {
    /// Pulse width T in seconds.
    pub pulse_width: f64,
    /// Carrier frequency f_c in Hz.
    pub carrier_hz: f64,
    /// Bandwidth B in Hz.
    pub bandwidth_hz: f64,
    /// Sampling period T_s in seconds.
    pub sample_period: f64,
    /// Total samples K per observation record (k = 1..=K).
    pub total_samples: usize,
    /// Sample window length T_d in seconds.
    pub window_len: f64,
}

impl Waveform {
    pub fn new(
        pulse_width: f64,
        carrier_hz: f64,
        bandwidth_hz: f64,
        sample_period: f64,
        total_samples: usize,
        window_len: f64,
    ) -> Result<Self> {
        let w = Self {
            pulse_width,
            carrier_hz,
            bandwidth_hz,
            sample_period,
            total_samples,
            window_len,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoopError::InvalidWaveform(m.to_string()));
        if !(self.pulse_width > 0.0 && self.pulse_width.is_finite()) {
            return bad("pulse width must be positive");
        }
        if !(self.sample_period > 0.0 && self.sample_period.is_finite()) {
            return bad("sample period must be positive");
        }
        if self.window_len < self.pulse_width {
            return bad("window length must be at least one pulse width");
        }
        if self.carrier_hz <= 0.0 || self.bandwidth_hz <= 0.0 {
            return bad("carrier and bandwidth must be positive");
        }
        if self.total_samples == 0 {
            return bad("record must contain at least one sample");
        }
        Ok(())
    }

    /// Unit-energy Gaussian pulse s(t) = 2^{1/4} T^{-1/2} exp(-pi t^2 / T^2).
    pub fn pulse(&self, t: f64) -> f64 {
        pulse_value(t, self)
    }

    /// ds/dt = (-2 pi t / T^2) s(t).
    pub fn pulse_deriv(&self, t: f64) -> f64 {
        pulse_derivative(t, self)
    }

    /// 1-based sample indices k for which s(kT_s - tau) is non-negligible.
    pub fn support_indices(&self, tau: f64) -> std::ops::RangeInclusive<usize> {
        let half = PULSE_SUPPORT * self.pulse_width;
        let lo = ((tau - half) / self.sample_period).ceil().max(1.0) as usize;
        let hi = ((tau + half) / self.sample_period)
            .floor()
            .min(self.total_samples as f64);
        if hi < 1.0 || lo as f64 > hi {
            // Empty range.
            return 1..=0;
        }
        lo..=hi as usize
    }
}

pub fn pulse_value(t: f64, w: &Waveform) -> f64 {
    let tw = w.pulse_width;
    let x = t / tw;
    2f64.powf(0.25) / tw.sqrt() * (-std::f64::consts::PI * x * x).exp()
}

pub fn pulse_derivative(t: f64, w: &Waveform) -> f64 {
    let tw = w.pulse_width;
    -2.0 * std::f64::consts::PI * t / (tw * tw) * pulse_value(t, w)
}

/// Free-space LOS loss in dB: 32.4 + 20 log10(d_km) + 20 log10(f_GHz).
pub fn pathloss_db(d_km: f64, f_ghz: f64) -> Result<f64> {
    if d_km <= 0.0 || f_ghz <= 0.0 || !d_km.is_finite() || !f_ghz.is_finite() {
        return Err(CoopError::InvalidPathloss { d: d_km, f: f_ghz });
    }
    Ok(32.4 + 20.0 * d_km.log10() + 20.0 * f_ghz.log10())
}

/// One sensing instance: geometry, powers, noise and backhaul channel gains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub tx_pos: [f64; 2],
    pub rx_pos: Vec<[f64; 2]>,
    pub target_pos: [f64; 2],
    /// Transmit power E (the waveform itself is power normalized).
    pub tx_energy: f64,
    /// Per-receiver complex noise power sigma^2_n.
    pub noise_var: Vec<f64>,
    /// Per-receiver backhaul transmit power P_n.
    pub backhaul_power: Vec<f64>,
    /// Per-receiver backhaul linear power gain g_n.
    pub backhaul_gain: Vec<f64>,
    /// Backhaul noise power N0.
    pub backhaul_noise: f64,
    /// Deterministic amplitude of the reflection coefficient xi_n.
    pub reflect_amp: f64,
    pub seed: u64,
}

impl Scene {
    pub fn n_receivers(&self) -> usize {
        self.rx_pos.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoopError::InvalidScene(m));
        let n = self.rx_pos.len();
        if n == 0 {
            return bad("at least one receiver required".into());
        }
        if self.noise_var.len() != n || self.backhaul_power.len() != n || self.backhaul_gain.len() != n {
            return bad("per-receiver vectors must all have length N".into());
        }
        for v in self
            .noise_var
            .iter()
            .chain(self.backhaul_power.iter())
            .chain(self.backhaul_gain.iter())
            .chain([self.backhaul_noise, self.tx_energy].iter())
        {
            if !(*v > 0.0 && v.is_finite()) {
                return bad(format!("powers and noise levels must be positive, got {v}"));
            }
        }
        for p in self.rx_pos.iter().chain([self.tx_pos, self.target_pos].iter()) {
            if !p[0].is_finite() || !p[1].is_finite() {
                return bad("positions must be finite".into());
            }
        }
        if !(self.reflect_amp > 0.0 && self.reflect_amp.is_finite()) {
            return bad("reflection amplitude must be positive".into());
        }
        Ok(())
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Two-hop propagation delay tau_n = (|tx - target| + |rx_n - target|) / c.
pub fn propagation_delay(scene: &Scene, n: usize) -> f64 {
    delay_at(scene.tx_pos, scene.rx_pos[n], scene.target_pos)
}

pub fn delay_at(tx: [f64; 2], rx: [f64; 2], target: [f64; 2]) -> f64 {
    (dist(tx, target) + dist(rx, target)) / SPEED_OF_LIGHT
}

/// Linear amplitude of the two-hop path loss: 10^{-(L_tx->t + L_t->rx)/20}.
/// Hop distances carry a 1 m near-field floor; the far-field LOS model
/// diverges at zero range.
pub fn two_hop_amplitude(scene: &Scene, w: &Waveform, n: usize) -> Result<f64> {
    let f_ghz = w.carrier_hz / 1e9;
    let d1 = dist(scene.tx_pos, scene.target_pos).max(1.0);
    let d2 = dist(scene.rx_pos[n], scene.target_pos).max(1.0);
    let l1 = pathloss_db(d1 / 1e3, f_ghz)?;
    let l2 = pathloss_db(d2 / 1e3, f_ghz)?;
    Ok(10f64.powf(-(l1 + l2) / 20.0))
}

/// Complex baseband samples observed at one receiver, with ground truth
/// retained for oracle checks.
#[derive(Debug, Clone)]
pub struct EchoRecord {
    pub samples: Vec<Complex64>,
    pub receiver_id: usize,
    pub true_tau: f64,
    pub true_alpha: Complex64,
}

impl EchoRecord {
    /// r_n(kT_s) with the paper's 1-based sample index.
    pub fn sample(&self, k: usize) -> Complex64 {
        self.samples[k - 1]
    }
}

/// Renders r(kT_s) = sqrt(E) alpha s(kT_s - tau) + w_k with w_k ~ CN(0, sigma2).
///
/// The noise is drawn sample-by-sample in index order so a fixed RNG state
/// yields a bit-identical record.
pub fn render_echo(
    e: f64,
    alpha: Complex64,
    tau: f64,
    sigma2: f64,
    w: &Waveform,
    receiver_id: usize,
    rng: &mut impl Rng,
) -> EchoRecord {
    let k = w.total_samples;
    let amp = e.sqrt();
    let std_half = (sigma2 / 2.0).sqrt();
    let mut samples = Vec::with_capacity(k);
    for ki in 1..=k {
        let t = ki as f64 * w.sample_period - tau;
        let mean = alpha * (amp * w.pulse(t));
        let noise = if sigma2 > 0.0 {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * std_half, im * std_half)
        } else {
            Complex64::new(0.0, 0.0)
        };
        samples.push(mean + noise);
    }
    EchoRecord {
        samples,
        receiver_id,
        true_tau: tau,
        true_alpha: alpha,
    }
}

/// Synthesizes the echo at receiver `n`: the reflection phase is drawn
/// uniformly per call, then noise samples in index order.
pub fn synthesize_echo(
    scene: &Scene,
    w: &Waveform,
    n: usize,
    rng: &mut impl Rng,
) -> Result<EchoRecord> {
    let rho = two_hop_amplitude(scene, w, n)?;
    let phase: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
    let xi = Complex64::from_polar(scene.reflect_amp, phase);
    let alpha = xi * rho;
    let tau = propagation_delay(scene, n);
    Ok(render_echo(
        scene.tx_energy,
        alpha,
        tau,
        scene.noise_var[n],
        w,
        n,
        rng,
    ))
}

/// Axis-aligned rectangle the target is drawn from.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TargetRegion {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl TargetRegion {
    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        ]
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        [
            [self.x_min, self.y_min],
            [self.x_min, self.y_max],
            [self.x_max, self.y_min],
            [self.x_max, self.y_max],
        ]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    pub fn inflate(&self, margin: f64) -> TargetRegion {
        TargetRegion {
            x_min: self.x_min - margin,
            x_max: self.x_max + margin,
            y_min: self.y_min - margin,
            y_max: self.y_max + margin,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> [f64; 2] {
        [
            self.x_min + rng.gen::<f64>() * (self.x_max - self.x_min),
            self.y_min + rng.gen::<f64>() * (self.y_max - self.y_min),
        ]
    }

    pub fn is_empty(&self) -> bool {
        self.x_max < self.x_min || self.y_max < self.y_min
    }
}

/// Scalar broadcast to all receivers, or one value per receiver.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vec(Vec<f64>),
}

impl ScalarOrVec {
    pub fn resolve(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            ScalarOrVec::Scalar(v) => Ok(vec![*v; n]),
            ScalarOrVec::Vec(v) if v.len() == n => Ok(v.clone()),
            ScalarOrVec::Vec(v) => Err(CoopError::InvalidScene(format!(
                "expected {n} per-receiver values, got {}",
                v.len()
            ))),
        }
    }
}

fn default_reflect_amp() -> f64 {
    1.0
}

/// JSON scenario file: geometry plus waveform parameters, all SI units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub tx_pos: [f64; 2],
    pub rx_pos: Vec<[f64; 2]>,
    pub target_region: TargetRegion,
    #[serde(rename = "E")]
    pub e: f64,
    pub sigma2: ScalarOrVec,
    #[serde(rename = "P")]
    pub p: ScalarOrVec,
    pub g: ScalarOrVec,
    #[serde(rename = "N0")]
    pub n0: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub fc: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "Ts")]
    pub ts: f64,
    #[serde(rename = "Td")]
    pub td: f64,
    pub seed: u64,
    #[serde(default = "default_reflect_amp")]
    pub reflect_amp: f64,
}

impl ScenarioFile {
    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    /// Largest two-hop delay over the target region. The sum of two point
    /// distances is convex in the target, so the maximum over a rectangle is
    /// attained at a corner.
    pub fn max_delay(&self) -> f64 {
        let mut tau_max: f64 = 0.0;
        for corner in self.target_region.corners() {
            for rx in &self.rx_pos {
                tau_max = tau_max.max(delay_at(self.tx_pos, *rx, corner));
            }
        }
        tau_max
    }

    /// Waveform with K chosen so the record covers [0, tau_max + 5T].
    pub fn waveform(&self) -> Result<Waveform> {
        let horizon = self.max_delay() + 5.0 * self.t;
        let k = (horizon / self.ts).ceil().max(1.0) as usize;
        Waveform::new(self.t, self.fc, self.b, self.ts, k, self.td)
    }

    pub fn scene_at(&self, target: [f64; 2]) -> Result<Scene> {
        let n = self.rx_pos.len();
        let scene = Scene {
            tx_pos: self.tx_pos,
            rx_pos: self.rx_pos.clone(),
            target_pos: target,
            tx_energy: self.e,
            noise_var: self.sigma2.resolve(n)?,
            backhaul_power: self.p.resolve(n)?,
            backhaul_gain: self.g.resolve(n)?,
            backhaul_noise: self.n0,
            reflect_amp: self.reflect_amp,
            seed: self.seed,
        };
        scene.validate()?;
        Ok(scene)
    }
}
