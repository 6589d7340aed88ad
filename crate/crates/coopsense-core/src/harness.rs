//! Scenario generation, Monte Carlo orchestration and CSV reporting.
//!
//! A sweep evaluates every enabled algorithm on shared per-trial echoes
//! (paired comparison): synthesize -> per-receiver ML estimation -> window
//! statistics -> bit allocation (for the hybrid schemes) -> quantized upload
//! -> fusion-center localization. Trials are independent work units with
//! per-trial RNG substreams derived from (seed, trial, role), so results are
//! byte-reproducible regardless of the worker pool.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backhaul::{
    bit_realloc, build_mac_region, greedy_select, mcsca_run, min_channel_uses, Backhaul,
    McscaConfig, TraceRow, TRACE_CSV_HEADER,
};
use crate::error::{CoopError, Result};
use crate::estimator::{crlb_alpha, crlb_tau, estimate_delay, DelaySearch, LocalEstimate};
use crate::fusion::{
    baseline_toa_idcs, baseline_toa_rss_idcs, build_receiver_context, epsilon_star,
    fc_ml_localize, hisdcs_observation, sdcs_observation, stacked_window, FimContext,
    FusionObservation, LocalizeOptions, RssModel, SdcsMode, UNIFORM_SDCS_BITS,
};
use crate::klt::{build_window, quantize_window, reconstruct, window_covariance, EtaModel, KltCodec, SampleWindow};
use crate::signal::{
    delay_at, dist, pathloss_db, pulse_value, synthesize_echo, EchoRecord, ScalarOrVec,
    ScenarioFile, TargetRegion, Waveform,
};

pub const SPEED_OF_LIGHT: f64 = crate::signal::SPEED_OF_LIGHT;

/// Search-region margin around the configured target region, meters.
pub const REGION_MARGIN_M: f64 = 20.0;

/// Delay-search margin around the region's delay span, in pulse widths.
const TAU_MARGIN_PULSES: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Linear,
    Circular,
    Random,
}

fn default_spacing() -> f64 {
    50.0
}
fn default_tx_distance() -> f64 {
    1000.0
}
fn default_reflect_amp() -> f64 {
    1.0
}

/// Receiver layout and target region for one experiment family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub topology: Topology,
    pub n: usize,
    #[serde(default = "default_spacing")]
    pub spacing: f64,
    /// Defaults to the topology's standard region when omitted.
    #[serde(default)]
    pub target_region: Option<TargetRegion>,
    #[serde(default = "default_tx_distance")]
    pub tx_distance: f64,
    #[serde(default = "default_reflect_amp")]
    pub reflect_amp: f64,
}

fn default_t() -> f64 {
    2e-8
}
fn default_fc() -> f64 {
    3.55e9
}
fn default_b() -> f64 {
    5e7
}
fn default_ts() -> f64 {
    1e-8
}
fn default_td() -> f64 {
    8e-8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaveformConfig {
    #[serde(rename = "T", default = "default_t")]
    pub t: f64,
    #[serde(default = "default_fc")]
    pub fc: f64,
    #[serde(rename = "B", default = "default_b")]
    pub b: f64,
    #[serde(rename = "Ts", default = "default_ts")]
    pub ts: f64,
    #[serde(rename = "Td", default = "default_td")]
    pub td: f64,
}

impl Default for WaveformConfig {
    fn default() -> Self {
        Self {
            t: default_t(),
            fc: default_fc(),
            b: default_b(),
            ts: default_ts(),
            td: default_td(),
        }
    }
}

fn default_p() -> f64 {
    1.0
}
fn default_n0() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackhaulConfig {
    /// Per-receiver transmit power toward the FC.
    #[serde(rename = "P", default = "default_p")]
    pub p: f64,
    #[serde(rename = "N0", default = "default_n0")]
    pub n0: f64,
}

impl Default for BackhaulConfig {
    fn default() -> Self {
        Self {
            p: default_p(),
            n0: default_n0(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SnrDb,
    N,
    EpsilonMult,
    KN,
    Fs,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::SnrDb => "snr_db",
            SweepAxis::N => "n",
            SweepAxis::EpsilonMult => "epsilon_mult",
            SweepAxis::KN => "k_n",
            SweepAxis::Fs => "fs",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum EpsilonRule {
    /// eps = value * eps_star (per-trial minimum achievable CRLB).
    Multiple(f64),
    /// Fixed eps in m^2.
    Absolute(f64),
}

impl EpsilonRule {
    pub fn resolve(&self, eps_star: f64) -> f64 {
        match self {
            EpsilonRule::Multiple(v) => v * eps_star,
            EpsilonRule::Absolute(v) => *v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Algorithm {
    HisdcsFull,
    HisdcsNoselect,
    BitRealloc,
    ToaIdcs,
    ToaRssIdcs,
    SdcsUniform8,
    SdcsIdeal,
}

pub const ALL_ALGORITHMS: [Algorithm; 7] = [
    Algorithm::HisdcsFull,
    Algorithm::HisdcsNoselect,
    Algorithm::BitRealloc,
    Algorithm::ToaIdcs,
    Algorithm::ToaRssIdcs,
    Algorithm::SdcsUniform8,
    Algorithm::SdcsIdeal,
];

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::HisdcsFull => "hisdcs_full",
            Algorithm::HisdcsNoselect => "hisdcs_noselect",
            Algorithm::BitRealloc => "bit_realloc",
            Algorithm::ToaIdcs => "toa_idcs",
            Algorithm::ToaRssIdcs => "toa_rss_idcs",
            Algorithm::SdcsUniform8 => "sdcs_uniform8",
            Algorithm::SdcsIdeal => "sdcs_ideal",
        }
    }

    pub fn parse_set(tokens: &[String]) -> Result<Vec<Algorithm>> {
        let mut enabled = std::collections::BTreeSet::new();
        for tok in tokens {
            match tok.as_str() {
                "hisdcs_full" => {
                    enabled.insert(Algorithm::HisdcsFull);
                }
                "hisdcs_noselect" => {
                    enabled.insert(Algorithm::HisdcsNoselect);
                }
                "bit_realloc" => {
                    enabled.insert(Algorithm::BitRealloc);
                }
                "toa_idcs" => {
                    enabled.insert(Algorithm::ToaIdcs);
                }
                "toa_rss_idcs" => {
                    enabled.insert(Algorithm::ToaRssIdcs);
                }
                "sdcs_uniform8" => {
                    enabled.insert(Algorithm::SdcsUniform8);
                }
                "sdcs_ideal" => {
                    enabled.insert(Algorithm::SdcsIdeal);
                }
                "baselines" => {
                    enabled.insert(Algorithm::ToaIdcs);
                    enabled.insert(Algorithm::ToaRssIdcs);
                    enabled.insert(Algorithm::SdcsUniform8);
                    enabled.insert(Algorithm::SdcsIdeal);
                }
                other => {
                    return Err(CoopError::InvalidConfig(format!(
                        "unknown algorithm token '{other}'"
                    )))
                }
            }
        }
        // Canonical order for deterministic reporting.
        Ok(ALL_ALGORITHMS
            .iter()
            .copied()
            .filter(|a| enabled.contains(a))
            .collect())
    }
}

fn default_trials() -> usize {
    500
}
fn default_snr_db() -> f64 {
    0.0
}
fn default_seed() -> u64 {
    1
}

/// Solver knob overrides (defaults follow the library defaults).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub mu: Option<f64>,
    pub beta0: Option<f64>,
    pub beta_decay: Option<f64>,
    pub max_iters: Option<usize>,
    pub conv_tol: Option<f64>,
    #[serde(default)]
    pub eta_model: Option<EtaModel>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mu: None,
            beta0: None,
            beta_decay: None,
            max_iters: None,
            conv_tol: None,
            eta_model: None,
        }
    }
}

impl SolverConfig {
    pub fn to_mcsca(&self) -> McscaConfig {
        let mut cfg = McscaConfig::default();
        if let Some(v) = self.mu {
            cfg.mu = v;
        }
        if let Some(v) = self.beta0 {
            cfg.beta0 = v;
        }
        if let Some(v) = self.beta_decay {
            cfg.beta_decay = v;
        }
        if let Some(v) = self.max_iters {
            cfg.max_iters = v;
        }
        if let Some(v) = self.conv_tol {
            cfg.conv_tol = v;
        }
        cfg
    }

    pub fn eta(&self) -> EtaModel {
        self.eta_model.unwrap_or_default()
    }
}

/// Top-level experiment description (JSON serializable).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub waveform: WaveformConfig,
    #[serde(default)]
    pub backhaul: BackhaulConfig,
    pub sweep: SweepConfig,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub epsilon_rule: EpsilonRule,
    pub algorithms: Vec<String>,
    /// Base SNR when the sweep axis is not SNR.
    #[serde(default = "default_snr_db")]
    pub snr_db: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(CoopError::InvalidConfig("trials must be >= 1".into()));
        }
        if self.sweep.values.is_empty() {
            return Err(CoopError::InvalidConfig("sweep values must be non-empty".into()));
        }
        if self.scenario.n == 0 {
            return Err(CoopError::InvalidConfig("need at least one receiver".into()));
        }
        Algorithm::parse_set(&self.algorithms)?;
        Ok(())
    }

    pub fn algorithm_set(&self) -> Vec<Algorithm> {
        Algorithm::parse_set(&self.algorithms).expect("validated")
    }
}

/// Deterministic per-(seed, trial, role) RNG substream.
pub fn substream(seed: u64, trial: u64, role: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&trial.to_le_bytes());
    key[16..24].copy_from_slice(&role.to_le_bytes());
    key[24..32].copy_from_slice(&0x636f6f7073656e73u64.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

const ROLE_TARGET: u64 = 0;
const ROLE_GEOMETRY: u64 = 1;
const ROLE_RECEIVER_BASE: u64 = 100;

fn default_region(topology: Topology) -> TargetRegion {
    match topology {
        Topology::Linear => TargetRegion {
            x_min: -50.0,
            x_max: 50.0,
            y_min: 50.0,
            y_max: 100.0,
        },
        Topology::Circular | Topology::Random => TargetRegion {
            x_min: -250.0,
            x_max: 250.0,
            y_min: -250.0,
            y_max: 250.0,
        },
    }
}

/// Builds the scenario file for one sweep point. Geometry is deterministic
/// given the config seed; the per-receiver noise power is calibrated so the
/// pulse-peak SNR E |alpha_n|^2 s(0)^2 / sigma^2, averaged over receivers
/// with the target at the region center, matches the requested level.
pub fn generate_scenario(cfg: &ExperimentConfig, sweep_value: f64) -> Result<ScenarioFile> {
    let mut n = cfg.scenario.n;
    let mut snr_db = cfg.snr_db;
    let mut wf_cfg = cfg.waveform.clone();
    let base_kn = (cfg.waveform.td / cfg.waveform.ts).round() + 2.0;
    match cfg.sweep.axis {
        SweepAxis::SnrDb => snr_db = sweep_value,
        SweepAxis::N => n = sweep_value.round() as usize,
        SweepAxis::EpsilonMult => {}
        SweepAxis::KN => {
            wf_cfg.td = (sweep_value.round() - 2.0).max(1.0) * wf_cfg.ts;
        }
        SweepAxis::Fs => {
            if !(sweep_value > 0.0) {
                return Err(CoopError::InvalidConfig("fs must be positive".into()));
            }
            wf_cfg.ts = 1.0 / sweep_value;
            wf_cfg.td = (base_kn - 2.0).max(1.0) * wf_cfg.ts;
        }
    }
    if n == 0 {
        return Err(CoopError::InvalidConfig("need at least one receiver".into()));
    }

    let tx_pos: [f64; 2];
    let rx_pos: Vec<[f64; 2]>;
    match cfg.scenario.topology {
        Topology::Linear => {
            tx_pos = [0.0, cfg.scenario.tx_distance];
            rx_pos = (0..n)
                .map(|i| {
                    [
                        (i as f64 - (n as f64 - 1.0) / 2.0) * cfg.scenario.spacing,
                        0.0,
                    ]
                })
                .collect();
        }
        Topology::Circular => {
            tx_pos = [0.0, 0.0];
            let radius = 500.0;
            rx_pos = (0..n)
                .map(|i| {
                    let ang = std::f64::consts::TAU * i as f64 / n as f64;
                    [radius * ang.cos(), radius * ang.sin()]
                })
                .collect();
        }
        Topology::Random => {
            tx_pos = [0.0, 0.0];
            let mut rng = substream(cfg.seed, 0, ROLE_GEOMETRY);
            let radius = 500.0;
            rx_pos = (0..n)
                .map(|_| {
                    use rand::Rng;
                    let r = radius * rng.gen::<f64>().sqrt().max(0.3);
                    let ang = std::f64::consts::TAU * rng.gen::<f64>();
                    [r * ang.cos(), r * ang.sin()]
                })
                .collect();
        }
    }
    let region = cfg
        .scenario
        .target_region
        .unwrap_or_else(|| default_region(cfg.scenario.topology));
    if region.is_empty() {
        return Err(CoopError::InvalidConfig("target region is empty".into()));
    }

    let e = 1.0;
    let f_ghz = wf_cfg.fc / 1e9;
    // Noise calibration at the region center.
    let center = region.center();
    let peak = {
        let w_tmp = Waveform::new(wf_cfg.t, wf_cfg.fc, wf_cfg.b, wf_cfg.ts, 1, wf_cfg.td)?;
        pulse_value(0.0, &w_tmp).powi(2)
    };
    let mut mean_gain = 0.0;
    for rx in &rx_pos {
        let l1 = pathloss_db(dist(tx_pos, center).max(1.0) / 1e3, f_ghz)?;
        let l2 = pathloss_db(dist(*rx, center).max(1.0) / 1e3, f_ghz)?;
        let rho = 10f64.powf(-(l1 + l2) / 20.0);
        mean_gain += (rho * cfg.scenario.reflect_amp).powi(2);
    }
    mean_gain /= rx_pos.len() as f64;
    let sigma2 = e * mean_gain * peak / 10f64.powf(snr_db / 10.0);

    // Backhaul gains: LOS path loss from each receiver to the FC (at the
    // transmitter site).
    let g: Vec<f64> = rx_pos
        .iter()
        .map(|rx| {
            let d_km = (dist(*rx, tx_pos) / 1e3).max(1e-3);
            pathloss_db(d_km, f_ghz).map(|l| 10f64.powf(-l / 10.0))
        })
        .collect::<Result<_>>()?;

    Ok(ScenarioFile {
        tx_pos,
        rx_pos,
        target_region: region,
        e,
        sigma2: ScalarOrVec::Scalar(sigma2),
        p: ScalarOrVec::Scalar(cfg.backhaul.p),
        g: ScalarOrVec::Vec(g),
        n0: cfg.backhaul.n0,
        t: wf_cfg.t,
        fc: wf_cfg.fc,
        b: wf_cfg.b,
        ts: wf_cfg.ts,
        td: wf_cfg.td,
        seed: cfg.seed,
        reflect_amp: cfg.scenario.reflect_amp,
    })
}

/// Delay-search interval per receiver covering the whole target region.
pub fn delay_search_bounds(sf: &ScenarioFile, w: &Waveform, rx: [f64; 2]) -> DelaySearch {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let r = &sf.target_region;
    let steps = 8;
    for ix in 0..=steps {
        for iy in 0..=steps {
            let p = [
                r.x_min + (r.x_max - r.x_min) * ix as f64 / steps as f64,
                r.y_min + (r.y_max - r.y_min) * iy as f64 / steps as f64,
            ];
            let tau = delay_at(sf.tx_pos, rx, p);
            lo = lo.min(tau);
            hi = hi.max(tau);
        }
    }
    let margin = TAU_MARGIN_PULSES * w.pulse_width;
    DelaySearch {
        tau_min: (lo - margin).max(w.sample_period),
        tau_max: hi + margin,
    }
}

/// Per-trial, per-algorithm outcome.
#[derive(Debug, Clone)]
pub enum AlgOutcome {
    Ok {
        theta: [f64; 2],
        sq_err: f64,
        /// Channel uses; None when the scheme has no finite accounting.
        w: Option<u64>,
        nodes: usize,
        solver_iterations: usize,
    },
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub trial: usize,
    pub target: [f64; 2],
    pub outcomes: Vec<(Algorithm, AlgOutcome)>,
}

struct ReceiverData {
    estimate: LocalEstimate,
    window: SampleWindow,
    codec: KltCodec,
    raw: DVector<f64>,
}

/// Runs all enabled algorithms on one trial with shared echoes.
pub fn run_pipeline_once(
    sf: &ScenarioFile,
    w: &Waveform,
    algorithms: &[Algorithm],
    epsilon_rule: EpsilonRule,
    solver: &SolverConfig,
    trial: usize,
) -> TrialRecord {
    let mut rng_t = substream(sf.seed, trial as u64, ROLE_TARGET);
    let target = sf.target_region.sample(&mut rng_t);
    match run_trial_inner(sf, w, algorithms, epsilon_rule, solver, trial, target) {
        Ok(outcomes) => TrialRecord {
            trial,
            target,
            outcomes,
        },
        Err(e) => TrialRecord {
            trial,
            target,
            outcomes: algorithms
                .iter()
                .map(|&a| (a, AlgOutcome::Failed(e.to_string())))
                .collect(),
        },
    }
}

fn run_trial_inner(
    sf: &ScenarioFile,
    w: &Waveform,
    algorithms: &[Algorithm],
    epsilon_rule: EpsilonRule,
    solver: &SolverConfig,
    trial: usize,
    target: [f64; 2],
) -> Result<Vec<(Algorithm, AlgOutcome)>> {
    let scene = sf.scene_at(target)?;
    let n = scene.n_receivers();
    let eta = solver.eta();
    let mcsca_cfg = solver.to_mcsca();

    // Shared echoes and local estimation.
    let mut receivers = Vec::with_capacity(n);
    for rx_id in 0..n {
        let mut rng = substream(sf.seed, trial as u64, ROLE_RECEIVER_BASE + rx_id as u64);
        let rec: EchoRecord = synthesize_echo(&scene, w, rx_id, &mut rng)?;
        let search = delay_search_bounds(sf, w, scene.rx_pos[rx_id]);
        let est = estimate_delay(&rec, w, scene.tx_energy, scene.noise_var[rx_id], search)?;
        let window = build_window(est.tau_hat, w)?;
        let codec = window_covariance(&est, &window, w, scene.tx_energy, scene.noise_var[rx_id])?;
        let raw = stacked_window(&window, &rec);
        receivers.push(ReceiverData {
            estimate: est,
            window,
            codec,
            raw,
        });
    }

    // FIM context at the trial geometry.
    let ctx = FimContext {
        receivers: receivers
            .iter()
            .enumerate()
            .map(|(rx_id, rd)| {
                build_receiver_context(
                    target,
                    scene.tx_pos,
                    scene.rx_pos[rx_id],
                    &rd.estimate,
                    &rd.window,
                    &rd.codec,
                    w,
                    scene.tx_energy,
                )
            })
            .collect::<Result<Vec<_>>>()?,
        eta_model: eta,
    };
    let full: Vec<usize> = (0..n).collect();
    let backhaul = Backhaul::from_scene(&scene);
    let search_region = sf.target_region.inflate(REGION_MARGIN_M);
    let opts = LocalizeOptions::default();

    let estimates: Vec<LocalEstimate> = receivers.iter().map(|r| r.estimate.clone()).collect();

    let hisdcs_localize = |omega: &[usize], bits: &[Vec<u32>]| -> Result<[f64; 2]> {
        let mut observations: Vec<FusionObservation> = Vec::with_capacity(omega.len());
        for (pos, &rx_id) in omega.iter().enumerate() {
            let rd = &receivers[rx_id];
            let coeffs = rd.codec.transform(&rd.raw);
            let qw = quantize_window(&coeffs, &rd.codec, &bits[pos])?;
            let rec_out = reconstruct(&rd.codec, &qw, eta);
            observations.push(hisdcs_observation(
                &rd.estimate,
                &rd.window,
                &rd.codec,
                rec_out.signal,
                &bits[pos],
                eta,
                scene.rx_pos[rx_id],
            ));
        }
        let fix = fc_ml_localize(&observations, scene.tx_pos, w, scene.tx_energy, &search_region, &opts)?;
        Ok(fix.theta)
    };

    let mut outcomes = Vec::with_capacity(algorithms.len());
    for &alg in algorithms {
        let outcome = (|| -> Result<AlgOutcome> {
            match alg {
                Algorithm::HisdcsFull | Algorithm::HisdcsNoselect | Algorithm::BitRealloc => {
                    let eps_star = epsilon_star(&ctx, &full)?;
                    let eps = epsilon_rule.resolve(eps_star);
                    if eps < eps_star {
                        return Err(CoopError::InfeasibleEpsilon { eps, eps_star });
                    }
                    let (omega, bits, w_uses, iters) = match alg {
                        Algorithm::HisdcsFull => {
                            let sel = greedy_select(&ctx, &backhaul, eps, &mcsca_cfg)?;
                            (
                                sel.allocation.omega,
                                sel.allocation.bits,
                                sel.allocation.channel_uses,
                                sel.total_iterations,
                            )
                        }
                        Algorithm::HisdcsNoselect => {
                            let run = mcsca_run(&ctx, &backhaul, &full, eps, &mcsca_cfg)?;
                            (
                                run.allocation.omega,
                                run.allocation.bits,
                                run.allocation.channel_uses,
                                run.iterations,
                            )
                        }
                        Algorithm::BitRealloc => {
                            let sel = bit_realloc(&ctx, &backhaul, eps, &mcsca_cfg)?;
                            (
                                sel.allocation.omega,
                                sel.allocation.bits,
                                sel.allocation.channel_uses,
                                sel.total_iterations,
                            )
                        }
                        _ => unreachable!(),
                    };
                    let theta = hisdcs_localize(&omega, &bits)?;
                    Ok(AlgOutcome::Ok {
                        theta,
                        sq_err: dist(theta, target).powi(2),
                        w: Some(w_uses),
                        nodes: omega.len(),
                        solver_iterations: iters,
                    })
                }
                Algorithm::ToaIdcs => {
                    let fix = baseline_toa_idcs(&estimates, &scene.rx_pos, scene.tx_pos, &search_region, &opts)?;
                    Ok(AlgOutcome::Ok {
                        theta: fix.theta,
                        sq_err: dist(fix.theta, target).powi(2),
                        w: Some(0),
                        nodes: n,
                        solver_iterations: fix.iterations,
                    })
                }
                Algorithm::ToaRssIdcs => {
                    let model = RssModel {
                        tx: scene.tx_pos,
                        carrier_ghz: w.carrier_hz / 1e9,
                        reflect_amp: scene.reflect_amp,
                    };
                    let fix = baseline_toa_rss_idcs(&estimates, &scene.rx_pos, model, &search_region, &opts)?;
                    Ok(AlgOutcome::Ok {
                        theta: fix.theta,
                        sq_err: dist(fix.theta, target).powi(2),
                        w: Some(0),
                        nodes: n,
                        solver_iterations: fix.iterations,
                    })
                }
                Algorithm::SdcsUniform8 | Algorithm::SdcsIdeal => {
                    let mode = if alg == Algorithm::SdcsUniform8 {
                        SdcsMode::Uniform8
                    } else {
                        SdcsMode::Ideal
                    };
                    let observations: Vec<FusionObservation> = receivers
                        .iter()
                        .enumerate()
                        .map(|(rx_id, rd)| {
                            sdcs_observation(
                                mode,
                                &rd.estimate,
                                &rd.window,
                                &rd.codec,
                                &rd.raw,
                                scene.rx_pos[rx_id],
                            )
                        })
                        .collect();
                    let fix = fc_ml_localize(
                        &observations,
                        scene.tx_pos,
                        w,
                        scene.tx_energy,
                        &search_region,
                        &opts,
                    )?;
                    let w_uses = if mode == SdcsMode::Uniform8 {
                        let region = build_mac_region(&backhaul, &full)?;
                        let totals: Vec<u64> = receivers
                            .iter()
                            .map(|rd| (rd.codec.dim() as u64) * UNIFORM_SDCS_BITS as u64)
                            .collect();
                        Some(min_channel_uses(&totals, &region))
                    } else {
                        None
                    };
                    Ok(AlgOutcome::Ok {
                        theta: fix.theta,
                        sq_err: dist(fix.theta, target).powi(2),
                        w: w_uses,
                        nodes: n,
                        solver_iterations: fix.iterations,
                    })
                }
            }
        })();
        outcomes.push((
            alg,
            outcome.unwrap_or_else(|e| AlgOutcome::Failed(e.to_string())),
        ));
    }
    Ok(outcomes)
}

/// One aggregated row of the sweep report.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub sweep_name: &'static str,
    pub sweep_value: f64,
    pub algorithm: Algorithm,
    pub mse: f64,
    pub mean_w: f64,
    pub mean_nodes: f64,
    pub mean_iterations: f64,
    /// Successful trials aggregated into the means.
    pub trials: usize,
    pub failures: usize,
}

pub const RESULT_CSV_HEADER: &str =
    "sweep_name,sweep_value,algorithm,mse,mean_w,mean_nodes,trials,failures";

impl ResultRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.sweep_name,
            self.sweep_value,
            self.algorithm.name(),
            self.mse,
            self.mean_w,
            self.mean_nodes,
            self.trials,
            self.failures
        )
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<ResultRow>,
    pub records: Vec<(f64, Vec<TrialRecord>)>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(RESULT_CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv());
            out.push('\n');
        }
        out
    }
}

/// Runs the full sweep; trials are distributed over the rayon pool and
/// aggregated in trial order.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let algorithms = cfg.algorithm_set();
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &value in &cfg.sweep.values {
        let mut point_cfg = cfg.clone();
        if cfg.sweep.axis == SweepAxis::EpsilonMult {
            point_cfg.epsilon_rule = EpsilonRule::Multiple(value);
        }
        let sf = generate_scenario(&point_cfg, value)?;
        let w = sf.waveform()?;
        let eps_rule = point_cfg.epsilon_rule;
        let solver = point_cfg.solver.clone();
        let algs = algorithms.clone();
        let trial_records: Vec<TrialRecord> = (0..cfg.trials)
            .into_par_iter()
            .map(|trial| run_pipeline_once(&sf, &w, &algs, eps_rule, &solver, trial))
            .collect();

        for &alg in &algorithms {
            let mut sq = 0.0;
            let mut w_acc = 0.0;
            let mut w_cnt = 0usize;
            let mut nodes_acc = 0.0;
            let mut iters_acc = 0.0;
            let mut ok = 0usize;
            let mut failed = 0usize;
            for rec in &trial_records {
                match rec
                    .outcomes
                    .iter()
                    .find(|(a, _)| *a == alg)
                    .map(|(_, o)| o)
                {
                    Some(AlgOutcome::Ok {
                        sq_err,
                        w,
                        nodes,
                        solver_iterations,
                        ..
                    }) => {
                        ok += 1;
                        sq += sq_err;
                        nodes_acc += *nodes as f64;
                        iters_acc += *solver_iterations as f64;
                        if let Some(wv) = w {
                            w_acc += *wv as f64;
                            w_cnt += 1;
                        }
                    }
                    Some(AlgOutcome::Failed(_)) => failed += 1,
                    None => {}
                }
            }
            let denom = ok.max(1) as f64;
            rows.push(ResultRow {
                sweep_name: cfg.sweep.axis.name(),
                sweep_value: value,
                algorithm: alg,
                mse: if ok > 0 { sq / denom } else { f64::NAN },
                mean_w: if w_cnt > 0 {
                    w_acc / w_cnt as f64
                } else {
                    f64::NAN
                },
                mean_nodes: if ok > 0 { nodes_acc / denom } else { f64::NAN },
                mean_iterations: if ok > 0 { iters_acc / denom } else { f64::NAN },
                trials: ok,
                failures: failed,
            });
        }
        records.push((value, trial_records));
    }
    Ok(SweepReport { rows, records })
}

/// Noise-free reference estimates with the target at the region center:
/// true delays, path-loss reflecting coefficients at zero phase, and
/// closed-form CRLBs. Used by the epsilon-star and trace entry points.
pub struct OracleContext {
    pub ctx: FimContext,
    pub backhaul: Backhaul,
    pub eps_star: f64,
}

pub fn oracle_context(sf: &ScenarioFile, w: &Waveform, eta: EtaModel) -> Result<OracleContext> {
    let center = sf.target_region.center();
    let scene = sf.scene_at(center)?;
    let n = scene.n_receivers();
    let mut receivers = Vec::with_capacity(n);
    for rx_id in 0..n {
        let tau = delay_at(scene.tx_pos, scene.rx_pos[rx_id], center);
        let rho = crate::signal::two_hop_amplitude(&scene, w, rx_id)?;
        let alpha = Complex64::new(rho * scene.reflect_amp, 0.0);
        let est = LocalEstimate {
            tau_hat: tau,
            alpha_hat: alpha,
            crlb_tau: crlb_tau(alpha, tau, scene.noise_var[rx_id], scene.tx_energy, w)?,
            crlb_alpha: crlb_alpha(tau, scene.noise_var[rx_id], scene.tx_energy, w)?,
            receiver_id: rx_id,
        };
        let window = build_window(est.tau_hat, w)?;
        let codec = window_covariance(&est, &window, w, scene.tx_energy, scene.noise_var[rx_id])?;
        receivers.push(build_receiver_context(
            center,
            scene.tx_pos,
            scene.rx_pos[rx_id],
            &est,
            &window,
            &codec,
            w,
            scene.tx_energy,
        )?);
    }
    let ctx = FimContext {
        receivers,
        eta_model: eta,
    };
    let full: Vec<usize> = (0..n).collect();
    let eps_star = epsilon_star(&ctx, &full)?;
    Ok(OracleContext {
        ctx,
        backhaul: Backhaul::from_scene(&scene),
        eps_star,
    })
}

/// Minimum achievable CRLB (center geometry) for every sweep point.
pub fn epsilon_star_rows(cfg: &ExperimentConfig) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &value in &cfg.sweep.values {
        let sf = generate_scenario(cfg, value)?;
        let w = sf.waveform()?;
        let oc = oracle_context(&sf, &w, cfg.solver.eta())?;
        rows.push((value, oc.eps_star));
    }
    Ok(rows)
}

/// Runs one MCSCA solve on the center-geometry oracle context of the first
/// sweep point and returns the per-iteration convergence trace as CSV.
pub fn trace_mcsca_csv(cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    let value = cfg.sweep.values[0];
    let sf = generate_scenario(cfg, value)?;
    let w = sf.waveform()?;
    let oc = oracle_context(&sf, &w, cfg.solver.eta())?;
    let eps = cfg.epsilon_rule.resolve(oc.eps_star);
    if eps < oc.eps_star {
        return Err(CoopError::InfeasibleEpsilon {
            eps,
            eps_star: oc.eps_star,
        });
    }
    let full: Vec<usize> = (0..oc.ctx.n()).collect();
    let run = mcsca_run(&oc.ctx, &oc.backhaul, &full, eps, &cfg.solver.to_mcsca())?;
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for row in &run.trace {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    Ok(out)
}

/// Infeasibility pre-check for absolute epsilon rules at the center
/// geometry of every sweep point; used by the CLI for exit code 2.
pub fn check_config_feasible(cfg: &ExperimentConfig) -> Result<()> {
    if let EpsilonRule::Absolute(eps) = cfg.epsilon_rule {
        for &value in &cfg.sweep.values {
            let sf = generate_scenario(cfg, value)?;
            let w = sf.waveform()?;
            let oc = oracle_context(&sf, &w, cfg.solver.eta())?;
            if eps < oc.eps_star {
                return Err(CoopError::InfeasibleEpsilon {
                    eps,
                    eps_star: oc.eps_star,
                });
            }
        }
    }
    Ok(())
}

#[allow(unused)]
fn trace_rows_for_tests(run_trace: &[TraceRow]) -> usize {
    run_trace.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> ExperimentConfig {
        ExperimentConfig {
            scenario: ScenarioConfig {
                topology: Topology::Linear,
                n: 5,
                spacing: 50.0,
                target_region: None,
                tx_distance: 1000.0,
                reflect_amp: 1.0,
            },
            waveform: WaveformConfig::default(),
            backhaul: BackhaulConfig::default(),
            sweep: SweepConfig {
                axis: SweepAxis::SnrDb,
                values: vec![0.0],
            },
            trials: 4,
            epsilon_rule: EpsilonRule::Multiple(1.5),
            algorithms: vec!["hisdcs_noselect".into(), "baselines".into()],
            snr_db: 0.0,
            seed: 7,
            solver: SolverConfig::default(),
        }
    }

    #[test]
    fn linear_topology_matches_paper_spacing() {
        let mut cfg = base_config();
        cfg.scenario.spacing = 50.0;
        let sf = generate_scenario(&cfg, 0.0).unwrap();
        let xs: Vec<f64> = sf.rx_pos.iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![-100.0, -50.0, 0.0, 50.0, 100.0]);
        // Offsetting so the first receiver sits at zero yields {0,50,..,200}.
        let shifted: Vec<f64> = xs.iter().map(|x| x - xs[0]).collect();
        assert_eq!(shifted, vec![0.0, 50.0, 100.0, 150.0, 200.0]);
        // Paper config reproduces K_n = 10 windows downstream (Td = 8 Ts).
        assert!((sf.td / sf.ts - 8.0).abs() < 1e-12);
    }

    #[test]
    fn circular_topology_symmetry() {
        let mut cfg = base_config();
        cfg.scenario.topology = Topology::Circular;
        cfg.scenario.n = 4;
        let sf = generate_scenario(&cfg, 0.0).unwrap();
        for (i, rx) in sf.rx_pos.iter().enumerate() {
            let ang = std::f64::consts::TAU * i as f64 / 4.0;
            assert!((rx[0] - 500.0 * ang.cos()).abs() < 1e-9);
            assert!((rx[1] - 500.0 * ang.sin()).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_targets() {
        let cfg = base_config();
        let sf = generate_scenario(&cfg, 0.0).unwrap();
        let draws_a: Vec<[f64; 2]> = (0..5)
            .map(|t| {
                let mut rng = substream(sf.seed, t, ROLE_TARGET);
                sf.target_region.sample(&mut rng)
            })
            .collect();
        let draws_b: Vec<[f64; 2]> = (0..5)
            .map(|t| {
                let mut rng = substream(sf.seed, t, ROLE_TARGET);
                sf.target_region.sample(&mut rng)
            })
            .collect();
        assert_eq!(draws_a, draws_b);
    }

    #[test]
    fn snr_calibration_matches_definition() {
        let cfg = base_config();
        let sf = generate_scenario(&cfg, 6.0).unwrap();
        let w = sf.waveform().unwrap();
        let center = sf.target_region.center();
        let scene = sf.scene_at(center).unwrap();
        let peak = w.pulse(0.0).powi(2);
        let mut mean_peak_power = 0.0;
        for rx_id in 0..scene.n_receivers() {
            let rho = crate::signal::two_hop_amplitude(&scene, &w, rx_id).unwrap();
            mean_peak_power += scene.tx_energy * (rho * scene.reflect_amp).powi(2) * peak;
        }
        mean_peak_power /= scene.n_receivers() as f64;
        let snr = mean_peak_power / scene.noise_var[0];
        assert!((10.0 * snr.log10() - 6.0).abs() < 1e-9, "snr {snr}");
    }

    #[test]
    fn unknown_algorithm_is_rejected() {
        let mut cfg = base_config();
        cfg.algorithms = vec!["warp_drive".into()];
        assert!(matches!(cfg.validate(), Err(CoopError::InvalidConfig(_))));
    }

    #[test]
    fn empty_algorithm_set_gives_header_only_csv() {
        let mut cfg = base_config();
        cfg.algorithms = vec![];
        cfg.trials = 1;
        let report = run_sweep(&cfg).unwrap();
        assert_eq!(report.to_csv(), format!("{RESULT_CSV_HEADER}\n"));
    }

    #[test]
    fn sweep_is_byte_reproducible() {
        let mut cfg = base_config();
        cfg.trials = 3;
        cfg.algorithms = vec!["toa_idcs".into(), "sdcs_ideal".into()];
        let a = run_sweep(&cfg).unwrap().to_csv();
        let b = run_sweep(&cfg).unwrap().to_csv();
        assert_eq!(a, b);
        assert!(a.lines().count() > 1);
    }

    #[test]
    fn config_json_round_trip() {
        let json = r#"{
            "scenario": {"topology": "linear", "n": 3},
            "sweep": {"axis": "snr_db", "values": [0.0, 5.0]},
            "trials": 2,
            "epsilon_rule": {"mode": "multiple", "value": 1.01},
            "algorithms": ["hisdcs_full", "baselines"],
            "seed": 9
        }"#;
        let cfg = ExperimentConfig::from_json(json).unwrap();
        assert_eq!(cfg.scenario.n, 3);
        assert_eq!(cfg.trials, 2);
        assert_eq!(cfg.algorithm_set().len(), 5);
        assert_eq!(cfg.waveform.t, 2e-8);
        let back = serde_json::to_string(&cfg).unwrap();
        let cfg2 = ExperimentConfig::from_json(&back).unwrap();
        assert_eq!(cfg2.scenario.n, 3);
    }

    #[test]
    fn pipeline_trial_produces_outcomes() {
        let mut cfg = base_config();
        cfg.trials = 1;
        cfg.snr_db = 10.0;
        let sf = generate_scenario(&cfg, 10.0).unwrap();
        let w = sf.waveform().unwrap();
        let algs = cfg.algorithm_set();
        let rec = run_pipeline_once(&sf, &w, &algs, cfg.epsilon_rule, &cfg.solver, 0);
        assert_eq!(rec.outcomes.len(), algs.len());
        for (alg, out) in &rec.outcomes {
            match out {
                AlgOutcome::Ok { theta, .. } => {
                    assert!(sf.target_region.inflate(REGION_MARGIN_M).contains(*theta));
                }
                AlgOutcome::Failed(e) => panic!("{} failed: {e}", alg.name()),
            }
        }
    }

    #[test]
    fn epsilon_star_and_trace() {
        let mut cfg = base_config();
        cfg.sweep.values = vec![0.0];
        let rows = epsilon_star_rows(&cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].1 > 0.0);

        let csv = trace_mcsca_csv(&cfg).unwrap();
        assert!(csv.starts_with(TRACE_CSV_HEADER));
        assert!(csv.lines().count() > 2);
    }
}
