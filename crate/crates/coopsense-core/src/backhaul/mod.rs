//! Backhaul resource allocation: Gaussian MAC capacity region, the
//! matrix-inequality constrained successive convex approximation (MCSCA)
//! solver for quantization-bit allocation, greedy node selection, and the
//! low-complexity bit reallocation variant.

pub mod barrier;
pub mod nnls;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector2};

use crate::error::{CoopError, Result};
use crate::fusion::{crlb_theta, epsilon_star, info_weight, info_weight_grad, FimContext};
use crate::klt::EtaModel;
use crate::signal::Scene;

pub use barrier::{solve_inner, BarrierConfig, InnerPoint, InnerProblem, InnerSolution};

/// Per-receiver backhaul channel parameters.
#[derive(Debug, Clone)]
pub struct Backhaul {
    pub power: Vec<f64>,
    pub gain: Vec<f64>,
    pub noise: f64,
}

impl Backhaul {
    pub fn from_scene(scene: &Scene) -> Self {
        Self {
            power: scene.backhaul_power.clone(),
            gain: scene.backhaul_gain.clone(),
            noise: scene.backhaul_noise,
        }
    }
}

/// Capacity of every nonempty subset of the selected receivers,
/// C_S = log2(1 + sum_{n in S} P_n g_n / N0) bits per channel use.
#[derive(Debug, Clone)]
pub struct MacRegion {
    /// Receiver ids, ascending; subset masks index into this order.
    pub members: Vec<usize>,
    /// caps[mask - 1] for mask in 1..2^m.
    pub caps: Vec<f64>,
}

pub const MAC_ENUMERATION_GUARD: usize = 12;

pub fn build_mac_region(backhaul: &Backhaul, members: &[usize]) -> Result<MacRegion> {
    let m = members.len();
    if m > MAC_ENUMERATION_GUARD {
        return Err(CoopError::MacRegionTooLarge(m));
    }
    let mut members = members.to_vec();
    members.sort_unstable();
    let snr: Vec<f64> = members
        .iter()
        .map(|&n| backhaul.power[n] * backhaul.gain[n] / backhaul.noise)
        .collect();
    let mut caps = Vec::with_capacity((1 << m) - 1);
    for mask in 1usize..(1 << m) {
        let total: f64 = (0..m).filter(|p| mask & (1 << p) != 0).map(|p| snr[p]).sum();
        caps.push((1.0 + total).log2());
    }
    Ok(MacRegion { members, caps })
}

/// Minimum integer channel uses supporting the per-node bit totals:
/// W* = max(1, ceil(max_S sum_{n in S} bits_n / C_S)).
pub fn min_channel_uses(node_bits: &[u64], region: &MacRegion) -> u64 {
    let m = region.members.len();
    assert_eq!(node_bits.len(), m);
    let mut w = 1u64;
    for mask in 1usize..(1 << m) {
        let total: u64 = (0..m)
            .filter(|p| mask & (1 << p) != 0)
            .map(|p| node_bits[p])
            .sum();
        if total == 0 {
            continue;
        }
        let need = (total as f64 / region.caps[mask - 1]).ceil() as u64;
        w = w.max(need.max(1));
    }
    w
}

/// First-order surrogate of the info weight at the tangent point x_t:
/// u(x) = (x - x_t) grad_y(x_t) + y(x_t).
pub fn surrogate_weight(x: f64, x_t: f64, gamma: f64, sigma2: f64, model: EtaModel) -> f64 {
    (x - x_t) * info_weight_grad(gamma, sigma2, x_t, model) + info_weight(gamma, sigma2, x_t, model)
}

/// MCSCA and selection knobs. Defaults follow the step-size rule
/// beta_t = beta0 / (1 + t)^decay with sum beta_t divergent.
#[derive(Debug, Clone)]
pub struct McscaConfig {
    pub mu: f64,
    pub beta0: f64,
    pub beta_decay: f64,
    pub max_iters: usize,
    /// Stop when the iterate step <= conv_tol * (1 + ||x_t||).
    pub conv_tol: f64,
    pub barrier: BarrierConfig,
}

impl Default for McscaConfig {
    fn default() -> Self {
        Self {
            mu: 1e-3,
            beta0: 4.0,
            beta_decay: 0.7,
            max_iters: 200,
            conv_tol: 1e-4,
            barrier: BarrierConfig::default(),
        }
    }
}

/// Final integer allocation.
#[derive(Debug, Clone)]
pub struct AllocationResult {
    /// Selected receiver ids, ascending.
    pub omega: Vec<usize>,
    /// Integer quantization bits per selected receiver (aligned with omega).
    pub bits: Vec<Vec<u32>>,
    /// W*: minimum integer channel uses for the rounded bits.
    pub channel_uses: u64,
    /// tr(M) of the relaxed solution at convergence.
    pub relaxed_crlb: f64,
    /// True CRLB at the rounded bits over omega.
    pub rounded_crlb: f64,
    pub kkt_residual: f64,
}

/// Per-iteration solver trace row (exportable as CSV).
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iter: usize,
    pub beta: f64,
    pub w: f64,
    pub tr_m: f64,
    pub crlb: f64,
    pub step_norm: f64,
    pub gap: f64,
    pub newton_steps: usize,
}

pub const TRACE_CSV_HEADER: &str = "iter,beta,w,tr_m,crlb,step_norm,gap,newton_steps";

impl TraceRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter, self.beta, self.w, self.tr_m, self.crlb, self.step_norm, self.gap,
            self.newton_steps
        )
    }
}

/// One full MCSCA run on a fixed node set.
#[derive(Debug, Clone)]
pub struct McscaRun {
    pub allocation: AllocationResult,
    /// Relaxed bits per selected receiver (aligned with allocation.omega).
    pub relaxed_bits: Vec<DVector<f64>>,
    pub relaxed_w: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restorations: usize,
    pub trace: Vec<TraceRow>,
}

/// Flattened per-variable problem data for one node set.
struct VarList {
    b: Vec<Vector2<f64>>,
    node_of: Vec<usize>,
    gammas: Vec<f64>,
    sigma2: Vec<f64>,
    /// Variable ranges per node position.
    node_ranges: Vec<std::ops::Range<usize>>,
    eta_model: EtaModel,
}

impl VarList {
    fn build(ctx: &FimContext, omega: &[usize]) -> Self {
        let mut b = Vec::new();
        let mut node_of = Vec::new();
        let mut gammas = Vec::new();
        let mut sigma2 = Vec::new();
        let mut node_ranges = Vec::new();
        for (pos, &n) in omega.iter().enumerate() {
            let rc = &ctx.receivers[n];
            let start = b.len();
            for j in 0..rc.dim() {
                let col = rc.projected.column(j);
                b.push(Vector2::new(col[0], col[1]));
                node_of.push(pos);
                gammas.push(rc.gammas[j]);
                sigma2.push(rc.sigma2);
            }
            node_ranges.push(start..b.len());
        }
        VarList {
            b,
            node_of,
            gammas,
            sigma2,
            node_ranges,
            eta_model: ctx.eta_model,
        }
    }

    fn m(&self) -> usize {
        self.b.len()
    }

    fn fim_at(&self, x: &DVector<f64>) -> Matrix2<f64> {
        let mut j = Matrix2::zeros();
        for i in 0..self.m() {
            let y = info_weight(self.gammas[i], self.sigma2[i], x[i], self.eta_model);
            let b = &self.b[i];
            j[(0, 0)] += y * b[0] * b[0];
            j[(0, 1)] += y * b[0] * b[1];
            j[(1, 1)] += y * b[1] * b[1];
        }
        j[(1, 0)] = j[(0, 1)];
        j
    }

    fn crlb_at(&self, x: &DVector<f64>) -> Result<f64> {
        crlb_theta(&self.fim_at(x))
    }

    fn node_totals_int(&self, bits: &[Vec<u32>]) -> Vec<u64> {
        bits.iter()
            .map(|v| v.iter().map(|&b| b as u64).sum())
            .collect()
    }
}

fn beta_at(cfg: &McscaConfig, t: usize) -> f64 {
    cfg.beta0 / (1.0 + t as f64).powf(cfg.beta_decay)
}


/// Repairs a center so every subproblem constraint is strictly feasible:
/// bits scale up until the CRLB clears eps, W clears the MAC ratios, and M
/// is re-seeded from the true FIM when the LMI margin is lost.
fn restore_center(
    vars: &VarList,
    caps: &[f64],
    eps: f64,
    center: &mut InnerPoint,
) -> Result<bool> {
    let mut touched = false;
    // CRLB strictly below the working budget. The surrogate step can
    // overshoot the true budget by a second-order margin; repair with the
    // smallest uniform bit upscale (bisected) so the correction vanishes
    // with the step size.
    let target = eps * (1.0 - 1e-6);
    let mut crlb = vars.crlb_at(&center.x)?;
    if !(crlb <= target) {
        let mut hi = 1.0f64;
        let mut guard = 0;
        while vars.crlb_at(&(center.x.clone() * hi))? > target {
            hi *= 1.3;
            guard += 1;
            if guard > 200 {
                return Err(CoopError::SolverNumerical(
                    "bit upscaling failed to restore the CRLB budget".into(),
                ));
            }
        }
        let mut lo = hi / 1.3;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if vars.crlb_at(&(center.x.clone() * mid))? > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        center.x *= hi;
        crlb = vars.crlb_at(&center.x)?;
        touched = true;
    }
    // W strictly above every MAC ratio and above 1.
    let mut totals = vec![0.0; vars.node_ranges.len()];
    for i in 0..vars.m() {
        totals[vars.node_of[i]] += center.x[i];
    }
    let mut w_floor = 1.0f64;
    for mask in 1usize..=(caps.len()) {
        let sum: f64 = (0..totals.len())
            .filter(|p| mask & (1 << p) != 0)
            .map(|p| totals[p])
            .sum();
        w_floor = w_floor.max(sum / caps[mask - 1]);
    }
    let w_min = (w_floor * (1.0 + 1e-9)).max(1.0 + 1e-9);
    if center.w < w_min {
        center.w = w_min;
        touched = true;
    }
    // Trace headroom and LMI margin for M.
    let j_true = vars.fim_at(&center.x);
    let tr_m = center.m[0] + center.m[2];
    let lmi_margin = {
        let g = Matrix4::new(
            center.m[0],
            center.m[1],
            1.0,
            0.0,
            center.m[1],
            center.m[2],
            0.0,
            1.0,
            1.0,
            0.0,
            j_true[(0, 0)],
            j_true[(0, 1)],
            0.0,
            1.0,
            j_true[(1, 0)],
            j_true[(1, 1)],
        );
        nalgebra::SymmetricEigen::new(g).eigenvalues.amin()
    };
    let scale = 1.0 + tr_m.abs();
    if !(tr_m < eps * (1.0 - 1e-12)) || lmi_margin <= 1e-10 * scale {
        let det = j_true[(0, 0)] * j_true[(1, 1)] - j_true[(0, 1)] * j_true[(1, 0)];
        let inv = Matrix2::new(
            j_true[(1, 1)] / det,
            -j_true[(0, 1)] / det,
            -j_true[(1, 0)] / det,
            j_true[(0, 0)] / det,
        );
        let delta = (eps - crlb) / 4.0;
        center.m = [inv[(0, 0)] + delta, inv[(0, 1)], inv[(1, 1)] + delta];
        touched = true;
    }
    Ok(touched)
}

/// Initial iterate: reverse-water-filling bit profile. Component i gets
/// X_i = max(floor_bits, log2(w_i / lambda) / 2) with w_i the component's
/// saturated information weight; the threshold lambda is bisected so the
/// CRLB lands at an interior target (90% of the way from eps* to eps).
///
/// A uniform start (equal bits per component) satisfies the budget only
/// with every coefficient inflated, and the SCA then has to traverse a long
/// binding-constraint valley to concentrate bits; starting at the
/// water-filling shape puts the iterate near the optimal profile.
fn initial_point(vars: &VarList, caps: &[f64], eps: f64, eps_star: f64) -> Result<InnerPoint> {
    let n_nodes = vars.node_ranges.len();
    let m = vars.m();
    // Saturated per-component weights; the floor keeps every variable
    // strictly positive for the barrier.
    let w_sat: Vec<f64> = (0..m)
        .map(|i| vars.b[i].norm_squared() * 2.0 / vars.sigma2[i])
        .collect();
    let w_max = w_sat.iter().cloned().fold(0.0f64, f64::max);
    if !(w_max > 0.0) {
        return Err(CoopError::SolverNumerical(
            "all information weights vanish".into(),
        ));
    }
    let floor_bits = 1e-3;
    let profile = |lambda: f64| -> DVector<f64> {
        DVector::from_iterator(
            m,
            (0..m).map(|i| (0.5 * (w_sat[i] / lambda).log2()).max(floor_bits)),
        )
    };
    let target = eps_star + 0.9 * (eps - eps_star);
    // CRLB is monotone increasing in lambda (fewer bits); bracket and bisect.
    let mut lo = w_max * 2f64.powi(-64);
    let mut hi = w_max;
    if vars.crlb_at(&profile(lo))? > target {
        return Err(CoopError::SolverNumerical(
            "initialization failed to reach the CRLB budget".into(),
        ));
    }
    for _ in 0..80 {
        let mid = (lo * hi).sqrt();
        if vars.crlb_at(&profile(mid))? > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let x = profile(lo);
    let crlb = vars.crlb_at(&x)?;
    let j = vars.fim_at(&x);
    let det = j[(0, 0)] * j[(1, 1)] - j[(0, 1)] * j[(1, 0)];
    let delta = (eps - crlb) / 4.0;
    let m = [
        j[(1, 1)] / det + delta,
        -j[(0, 1)] / det,
        j[(0, 0)] / det + delta,
    ];
    let mut totals = vec![0.0; n_nodes];
    for i in 0..vars.m() {
        totals[vars.node_of[i]] += x[i];
    }
    let mut w = 1.0f64;
    for mask in 1usize..=(caps.len()) {
        let sum: f64 = (0..n_nodes)
            .filter(|p| mask & (1 << p) != 0)
            .map(|p| totals[p])
            .sum();
        w = w.max(sum / caps[mask - 1]);
    }
    Ok(InnerPoint {
        x,
        w: w * 1.05 + 0.1,
        m,
    })
}

/// KKT residual of the relaxed problem at the returned point, with
/// multipliers recovered by non-negative least squares over the active set.
fn kkt_residual_at(vars: &VarList, caps: &[f64], eps: f64, point: &InnerPoint) -> f64 {
    let m = vars.m();
    let dim = m + 4; // X, W, m11, m12, m22 with symmetric m12 folded once.
    let n_nodes = vars.node_ranges.len();

    // Gradient columns of active constraints.
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut fvals: Vec<f64> = Vec::new();

    // Trace.
    let tr = point.m[0] + point.m[2];
    if (tr - eps).abs() <= 1e-5 * eps.max(1e-30) {
        let mut g = DVector::zeros(dim);
        g[m + 1] = 1.0;
        g[m + 3] = 1.0;
        cols.push(g);
        fvals.push(tr - eps);
    }
    // MAC subsets.
    let mut totals = vec![0.0; n_nodes];
    for i in 0..m {
        totals[vars.node_of[i]] += point.x[i];
    }
    for mask in 1usize..=(caps.len()) {
        let sum: f64 = (0..n_nodes)
            .filter(|p| mask & (1 << p) != 0)
            .map(|p| totals[p])
            .sum();
        let f = sum - caps[mask - 1] * point.w;
        if f.abs() <= 1e-5 * (caps[mask - 1] * point.w).max(1.0) {
            let mut g = DVector::zeros(dim);
            for i in 0..m {
                if mask & (1 << vars.node_of[i]) != 0 {
                    g[i] = 1.0;
                }
            }
            g[m] = -caps[mask - 1];
            cols.push(g);
            fvals.push(f);
        }
    }
    // LMI through its smallest eigenvalue.
    let j_true = vars.fim_at(&point.x);
    let g_mat = Matrix4::new(
        point.m[0],
        point.m[1],
        1.0,
        0.0,
        point.m[1],
        point.m[2],
        0.0,
        1.0,
        1.0,
        0.0,
        j_true[(0, 0)],
        j_true[(0, 1)],
        0.0,
        1.0,
        j_true[(1, 0)],
        j_true[(1, 1)],
    );
    let eig = nalgebra::SymmetricEigen::new(g_mat);
    let scale_g = 1.0 + g_mat.trace().abs() / 4.0;
    // The LMI multiplier is a PSD matrix supported on the near-null
    // eigenspace of G (dimension 2 when the trace budget binds, since then
    // M = J^{-1}); span it with all near-null eigenvector pairs, diagonal
    // directions sign-constrained and cross directions free.
    let null_idx: Vec<usize> = (0..4)
        .filter(|&i| eig.eigenvalues[i] <= 1e-5 * scale_g)
        .collect();
    let lmi_col = |vk: nalgebra::VectorView4<f64>, vl: nalgebra::VectorView4<f64>| -> DVector<f64> {
        let mut g = DVector::zeros(dim);
        for i in 0..m {
            let dy = info_weight_grad(vars.gammas[i], vars.sigma2[i], point.x[i], vars.eta_model);
            let b = &vars.b[i];
            let bk = b[0] * vk[2] + b[1] * vk[3];
            let bl = b[0] * vl[2] + b[1] * vl[3];
            g[i] = -dy * bk * bl;
        }
        g[m + 1] = -(vk[0] * vl[0]);
        g[m + 2] = -(vk[0] * vl[1] + vk[1] * vl[0]);
        g[m + 3] = -(vk[1] * vl[1]);
        g
    };
    for (pos, &k) in null_idx.iter().enumerate() {
        let vk = eig.eigenvectors.column(k);
        cols.push(lmi_col(vk, vk));
        fvals.push(-eig.eigenvalues[k]);
        for &l in null_idx.iter().skip(pos + 1) {
            let vl = eig.eigenvectors.column(l);
            let cross = lmi_col(vk, vl) * 2.0;
            cols.push(cross.clone());
            fvals.push(0.0);
            cols.push(-cross);
            fvals.push(0.0);
        }
    }
    // Variable bounds.
    let x_scale = point.x.amax().max(1.0);
    for i in 0..m {
        if point.x[i] <= 1e-5 * x_scale {
            let mut g = DVector::zeros(dim);
            g[i] = -1.0;
            cols.push(g);
            fvals.push(-point.x[i]);
        }
    }
    if (point.w - 1.0).abs() <= 1e-5 * point.w.max(1.0) {
        let mut g = DVector::zeros(dim);
        g[m] = -1.0;
        cols.push(g);
        fvals.push(1.0 - point.w);
    }

    // Stationarity: grad f0 + sum lambda_i grad f_i = 0 with f0 = W.
    let mut grad_f0 = DVector::zeros(dim);
    grad_f0[m] = 1.0;
    if cols.is_empty() {
        return grad_f0.norm();
    }
    let a = DMatrix::from_columns(&cols.iter().map(|c| c.column(0)).collect::<Vec<_>>());
    let b = -grad_f0.clone();
    let lambda = nnls::nnls(&a, &b, 200);
    let resid = (&a * &lambda) - b;
    let mut scale = 1.0 + grad_f0.norm();
    for (i, c) in cols.iter().enumerate() {
        scale += lambda[i] * c.norm();
    }
    let stat = resid.norm() / scale;
    let compl = lambda
        .iter()
        .zip(fvals.iter())
        .map(|(l, f)| (l * f).abs())
        .fold(0.0f64, f64::max)
        / scale;
    stat + compl
}

/// Runs Algorithm-1-style MCSCA on the selected node set.
///
/// Requires eps >= the minimum achievable CRLB for this selection. Returns
/// the relaxed solution, the ceil-rounded integer bits, the minimum integer
/// channel-use count, the per-iteration trace, and the KKT residual of the
/// relaxed problem at the final iterate.
pub fn mcsca_run(
    ctx: &FimContext,
    backhaul: &Backhaul,
    omega: &[usize],
    eps: f64,
    cfg: &McscaConfig,
) -> Result<McscaRun> {
    let mut omega = omega.to_vec();
    omega.sort_unstable();
    let eps_star = epsilon_star(ctx, &omega)?;
    if eps < eps_star * (1.0 + 1e-12) {
        return Err(CoopError::InfeasibleEpsilon { eps, eps_star });
    }
    let region = build_mac_region(backhaul, &omega)?;
    let vars = VarList::build(ctx, &omega);

    let mut center = initial_point(&vars, &region.caps, eps, eps_star)?;
    let mut trace = Vec::new();
    let mut restorations = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;
    // Working-budget backoff: the tangent surrogate lets the inner solution
    // overshoot the true CRLB budget by a step-squared margin, and repairing
    // that every iteration sustains a limit cycle at the trust radius.
    // Tightening the inner budget by an adaptive safety factor keeps the
    // iterates truly feasible, so the surrogate fixed point attracts.
    let mut safety = 0.0f64;
    let gap_rel = (eps - eps_star) / eps;

    for t in 0..cfg.max_iters {
        iterations = t + 1;
        let eps_inner = eps * (1.0 - safety);
        if restore_center(&vars, &region.caps, eps_inner, &mut center)? {
            restorations += 1;
        }
        let beta = beta_at(cfg, t);
        let y_t: Vec<f64> = (0..vars.m())
            .map(|i| info_weight(vars.gammas[i], vars.sigma2[i], center.x[i], vars.eta_model))
            .collect();
        let dy_t: Vec<f64> = (0..vars.m())
            .map(|i| info_weight_grad(vars.gammas[i], vars.sigma2[i], center.x[i], vars.eta_model))
            .collect();
        let prob = InnerProblem {
            b: vars.b.clone(),
            node_of: vars.node_of.clone(),
            n_nodes: omega.len(),
            y_t,
            dy_t,
            caps: region.caps.clone(),
            eps: eps_inner,
            mu_obj: cfg.mu,
            mu_con: cfg.mu,
            beta,
            center: center.clone(),
        };
        let sol = match solve_inner(&prob, &cfg.barrier) {
            Ok(s) => s,
            Err(CoopError::RestorationRequired(_)) => {
                // Re-seed M from the true FIM and retry once.
                restorations += 1;
                let eps = eps_inner;
                let crlb = vars.crlb_at(&center.x)?;
                let j = vars.fim_at(&center.x);
                let det = j[(0, 0)] * j[(1, 1)] - j[(0, 1)] * j[(1, 0)];
                let delta = (eps - crlb) / 4.0;
                center.m = [
                    j[(1, 1)] / det + delta,
                    -j[(0, 1)] / det,
                    j[(0, 0)] / det + delta,
                ];
                let prob = InnerProblem {
                    center: center.clone(),
                    ..prob
                };
                solve_inner(&prob, &cfg.barrier)?
            }
            Err(e) => return Err(e),
        };
        let step = sol.point.distance_sq(&center).sqrt();
        let crlb_now = vars.crlb_at(&sol.point.x).unwrap_or(f64::INFINITY);
        // Backoff feedback: grow the safety margin past the observed
        // relative violation, decay it geometrically while clean.
        let violation = (crlb_now - eps) / eps;
        if violation > 0.0 {
            safety = (2.0 * (safety.max(violation))).min(0.5 * gap_rel.max(0.0));
        } else {
            safety *= 0.3;
        }
        trace.push(TraceRow {
            iter: t,
            beta,
            w: sol.point.w,
            tr_m: sol.point.m[0] + sol.point.m[2],
            crlb: crlb_now,
            step_norm: step,
            gap: sol.gap,
            newton_steps: sol.newton_steps,
        });
        let prev_norm = center.norm();
        center = sol.point;
        // Converged only once the working budget has relaxed back to eps;
        // otherwise the fixed point belongs to the tightened problem.
        if step <= cfg.conv_tol * (1.0 + prev_norm) && safety <= 1e-7 {
            converged = true;
            break;
        }
    }

    // Round up (Eq.-33 style) and account channel uses.
    let relaxed_bits: Vec<DVector<f64>> = vars
        .node_ranges
        .iter()
        .map(|r| DVector::from_iterator(r.len(), r.clone().map(|i| center.x[i])))
        .collect();
    let bits: Vec<Vec<u32>> = relaxed_bits
        .iter()
        .map(|v| v.iter().map(|&x| x.max(0.0).ceil() as u32).collect())
        .collect();
    let rounded_x = DVector::from_iterator(
        vars.m(),
        bits.iter().flat_map(|v| v.iter().map(|&b| b as f64)),
    );
    let rounded_crlb = vars.crlb_at(&rounded_x)?;
    let channel_uses = min_channel_uses(&vars.node_totals_int(&bits), &region);
    let kkt = kkt_residual_at(&vars, &region.caps, eps, &center);

    Ok(McscaRun {
        allocation: AllocationResult {
            omega,
            bits,
            channel_uses,
            relaxed_crlb: center.m[0] + center.m[2],
            rounded_crlb,
            kkt_residual: kkt,
        },
        relaxed_bits,
        relaxed_w: center.w,
        iterations,
        converged,
        restorations,
        trace,
    })
}

/// Node-selection outcome with run accounting.
#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub allocation: AllocationResult,
    pub relaxed_w: f64,
    pub mcsca_runs: usize,
    pub total_iterations: usize,
}

/// Greedy node selection: run MCSCA on the full set, then repeatedly drop
/// the node carrying the fewest relaxed bits (larger index dropped on ties)
/// while the integer channel-use count does not increase and the reduced
/// set stays feasible. Returns the best accepted allocation.
pub fn greedy_select(
    ctx: &FimContext,
    backhaul: &Backhaul,
    eps: f64,
    cfg: &McscaConfig,
) -> Result<SelectionOutcome> {
    let full: Vec<usize> = (0..ctx.n()).collect();
    let mut runs = 1usize;
    let mut current = mcsca_run(ctx, backhaul, &full, eps, cfg)?;
    let mut total_iterations = current.iterations;
    let mut accepted: Vec<McscaRun> = vec![current.clone()];

    loop {
        let omega = current.allocation.omega.clone();
        if omega.len() <= 1 {
            break;
        }
        // Node with the minimum total relaxed bits; ties drop the larger id.
        let mut drop_pos = 0usize;
        let mut min_total = f64::INFINITY;
        for (pos, bits) in current.relaxed_bits.iter().enumerate() {
            let total: f64 = bits.iter().sum();
            if total <= min_total {
                min_total = total;
                drop_pos = pos;
            }
        }
        let reduced: Vec<usize> = omega
            .iter()
            .enumerate()
            .filter(|(p, _)| *p != drop_pos)
            .map(|(_, &n)| n)
            .collect();
        match epsilon_star(ctx, &reduced) {
            Ok(es) if eps >= es * (1.0 + 1e-12) => {}
            _ => break,
        }
        runs += 1;
        let next = match mcsca_run(ctx, backhaul, &reduced, eps, cfg) {
            Ok(r) => r,
            Err(_) => break,
        };
        total_iterations += next.iterations;
        if next.allocation.channel_uses > current.allocation.channel_uses {
            break;
        }
        accepted.push(next.clone());
        current = next;
    }

    // Best accepted by (W*, relaxed W); later entries win ties (smaller sets).
    let mut best = &accepted[0];
    for cand in accepted.iter().skip(1) {
        let better = (cand.allocation.channel_uses, cand.relaxed_w)
            <= (best.allocation.channel_uses, best.relaxed_w);
        if better {
            best = cand;
        }
    }
    Ok(SelectionOutcome {
        allocation: best.allocation.clone(),
        relaxed_w: best.relaxed_w,
        mcsca_runs: runs,
        total_iterations,
    })
}

/// Low-complexity bit reallocation: one MCSCA run on the full set, floor the
/// relaxed bits, then greedily add single bits where they reduce the CRLB
/// most (lexicographic tie-break) until the budget holds.
///
/// The loop CRLB is evaluated over an explicit node set that starts at the
/// full selection and only shrinks after a verified pass: zero-bit nodes
/// still contribute their prior-mean information while in the set, and a
/// node that receives a bit rejoins it. The returned selection therefore
/// certifiably meets the budget with zero-bit nodes excluded.
pub fn bit_realloc(
    ctx: &FimContext,
    backhaul: &Backhaul,
    eps: f64,
    cfg: &McscaConfig,
) -> Result<SelectionOutcome> {
    let full: Vec<usize> = (0..ctx.n()).collect();
    let run = mcsca_run(ctx, backhaul, &full, eps, cfg)?;
    let vars = VarList::build(ctx, &full);

    let mut bits: Vec<Vec<u32>> = run
        .relaxed_bits
        .iter()
        .map(|v| v.iter().map(|&x| x.max(0.0).floor() as u32).collect())
        .collect();

    let node_dim: Vec<usize> = vars.node_ranges.iter().map(|r| r.len()).collect();
    let carrying = |bits: &[Vec<u32>]| -> Vec<bool> {
        bits.iter().map(|v| v.iter().any(|&b| b > 0)).collect()
    };
    let crlb_of = |bits: &[Vec<u32>], in_set: &[bool]| -> f64 {
        let mut j = Matrix2::zeros();
        for (p, &inside) in in_set.iter().enumerate() {
            if !inside {
                continue;
            }
            for (jj, i) in vars.node_ranges[p].clone().enumerate() {
                let y = info_weight(
                    vars.gammas[i],
                    vars.sigma2[i],
                    bits[p][jj] as f64,
                    vars.eta_model,
                );
                let b = &vars.b[i];
                j[(0, 0)] += y * b[0] * b[0];
                j[(0, 1)] += y * b[0] * b[1];
                j[(1, 1)] += y * b[1] * b[1];
            }
        }
        j[(1, 0)] = j[(0, 1)];
        crlb_theta(&j).unwrap_or(f64::INFINITY)
    };
    let union = |a: &[bool], b: &[bool]| -> Vec<bool> {
        a.iter().zip(b.iter()).map(|(x, y)| *x || *y).collect()
    };

    let n_nodes = bits.len();
    let mut eval_set = vec![true; n_nodes];
    let mut increments = 0usize;
    loop {
        // Increment phase: the evaluation set may only grow (rejoins).
        loop {
            let now_set = union(&eval_set, &carrying(&bits));
            let crlb = crlb_of(&bits, &now_set);
            if crlb <= eps {
                break;
            }
            let mut best: Option<(f64, usize, usize)> = None;
            for p in 0..n_nodes {
                for j in 0..node_dim[p] {
                    bits[p][j] += 1;
                    let cand_set = union(&eval_set, &carrying(&bits));
                    let cand = crlb_of(&bits, &cand_set);
                    bits[p][j] -= 1;
                    if best.map_or(true, |(c, _, _)| cand < c) {
                        best = Some((cand, p, j));
                    }
                }
            }
            let (best_crlb, p, j) = best.unwrap();
            // Every +1 bit strictly grows the FIM over a non-shrinking set,
            // so the CRLB must drop.
            if !(best_crlb < crlb) {
                return Err(CoopError::SolverNumerical(
                    "bit increment failed to reduce the CRLB".into(),
                ));
            }
            bits[p][j] += 1;
            increments += 1;
            if increments > 100_000 {
                return Err(CoopError::SolverNumerical(
                    "bit reallocation exceeded the increment budget".into(),
                ));
            }
        }
        let act = carrying(&bits);
        if act.iter().all(|&v| !v) {
            // The prior information alone meets the budget; keep the full
            // selection with zero-bit uploads.
            break;
        }
        if act == eval_set || crlb_of(&bits, &act) <= eps {
            eval_set = act;
            break;
        }
        // Dropping zero-bit nodes lost their prior information; re-verify
        // over the reduced set.
        eval_set = act;
    }

    let omega: Vec<usize> = (0..n_nodes).filter(|&p| eval_set[p]).map(|p| full[p]).collect();
    let kept_bits: Vec<Vec<u32>> = (0..n_nodes)
        .filter(|&p| eval_set[p])
        .map(|p| bits[p].clone())
        .collect();
    let final_crlb = crlb_of(&bits, &eval_set);
    let region = build_mac_region(backhaul, &omega)?;
    let totals: Vec<u64> = kept_bits
        .iter()
        .map(|v| v.iter().map(|&b| b as u64).sum())
        .collect();
    let channel_uses = min_channel_uses(&totals, &region);
    Ok(SelectionOutcome {
        allocation: AllocationResult {
            omega,
            bits: kept_bits,
            channel_uses,
            relaxed_crlb: run.allocation.relaxed_crlb,
            rounded_crlb: final_crlb,
            kkt_residual: run.allocation.kkt_residual,
        },
        relaxed_w: run.relaxed_w,
        mcsca_runs: 1,
        total_iterations: run.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::ReceiverContext;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn synth_ctx(rng: &mut ChaCha12Rng, n_nodes: usize, dim: usize) -> FimContext {
        let receivers = (0..n_nodes)
            .map(|id| {
                let sigma2 = 0.8 + 0.4 * rng.gen::<f64>();
                let mut projected = DMatrix::zeros(2, dim);
                for c in 0..dim {
                    projected[(0, c)] = rng.gen::<f64>() * 2.0 - 1.0;
                    projected[(1, c)] = rng.gen::<f64>() * 2.0 - 1.0;
                }
                let gammas = DVector::from_iterator(
                    dim,
                    (0..dim).map(|_| sigma2 / 2.0 + rng.gen::<f64>()),
                );
                ReceiverContext {
                    receiver_id: id,
                    jacobian: DMatrix::zeros(2, dim),
                    projected,
                    gammas,
                    sigma2,
                }
            })
            .collect();
        FimContext {
            receivers,
            eta_model: EtaModel::PaperHalfBit,
        }
    }

    fn synth_backhaul(n: usize, snr: f64) -> Backhaul {
        Backhaul {
            power: vec![1.0; n],
            gain: vec![snr; n],
            noise: 1.0,
        }
    }

    #[test]
    fn mac_region_reference_values() {
        let bh = synth_backhaul(1, 1.0);
        let region = build_mac_region(&bh, &[0]).unwrap();
        assert!((region.caps[0] - 1.0).abs() < 1e-12);

        let bh = synth_backhaul(2, 1.5);
        let region = build_mac_region(&bh, &[0, 1]).unwrap();
        // Masks: {0} -> log2(2.5), {1} -> log2(2.5), {0,1} -> log2(4) = 2.
        assert!((region.caps[2] - 2.0).abs() < 1e-12);

        // Monotone under subset growth.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = 4;
            let bh = Backhaul {
                power: (0..n).map(|_| rng.gen::<f64>() + 0.1).collect(),
                gain: (0..n).map(|_| rng.gen::<f64>() + 0.1).collect(),
                noise: 0.5,
            };
            let region = build_mac_region(&bh, &[0, 1, 2, 3]).unwrap();
            for mask in 1usize..16 {
                for sup in mask..16 {
                    if sup & mask == mask {
                        assert!(region.caps[mask - 1] <= region.caps[sup - 1] + 1e-12);
                    }
                }
            }
        }

        assert!(matches!(
            build_mac_region(&synth_backhaul(13, 1.0), &(0..13).collect::<Vec<_>>()),
            Err(CoopError::MacRegionTooLarge(13))
        ));
    }

    #[test]
    fn min_channel_uses_examples() {
        let region = MacRegion {
            members: vec![0],
            caps: vec![1.0],
        };
        assert_eq!(min_channel_uses(&[10], &region), 10);
        assert_eq!(min_channel_uses(&[0], &region), 1);

        let region = MacRegion {
            members: vec![0, 1],
            caps: vec![2.0, 2.0, 3.0],
        };
        assert_eq!(min_channel_uses(&[6, 6], &region), 4);
    }

    #[test]
    fn min_channel_uses_matches_brute_force() {
        // Independent enumeration: recursive subset expansion.
        fn brute(node_bits: &[u64], caps: &[f64], m: usize) -> u64 {
            fn subsets(m: usize) -> Vec<Vec<usize>> {
                let mut all = vec![vec![]];
                for i in 0..m {
                    let mut next = all.clone();
                    for s in all {
                        let mut t = s.clone();
                        t.push(i);
                        next.push(t);
                    }
                    all = next;
                }
                all.into_iter().filter(|s| !s.is_empty()).collect()
            }
            let mut w = 1u64;
            for s in subsets(m) {
                let total: u64 = s.iter().map(|&p| node_bits[p]).sum();
                let mask = s.iter().fold(0usize, |acc, &p| acc | (1 << p));
                if total > 0 {
                    w = w.max((total as f64 / caps[mask - 1]).ceil() as u64);
                }
            }
            w
        }
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for m in 1..=6usize {
            for _ in 0..20 {
                let bh = Backhaul {
                    power: (0..m).map(|_| rng.gen::<f64>() * 2.0 + 0.2).collect(),
                    gain: (0..m).map(|_| rng.gen::<f64>() * 2.0 + 0.2).collect(),
                    noise: 1.0,
                };
                let region = build_mac_region(&bh, &(0..m).collect::<Vec<_>>()).unwrap();
                let bits: Vec<u64> = (0..m).map(|_| rng.gen_range(0..40)).collect();
                assert_eq!(
                    min_channel_uses(&bits, &region),
                    brute(&bits, &region.caps, m)
                );
            }
        }
    }

    #[test]
    fn surrogate_is_tangent_with_local_quadratic_error() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..50 {
            let gamma = rng.gen::<f64>() * 3.0 + 0.1;
            let s2 = rng.gen::<f64>() * 2.0 + 0.1;
            let x_t = rng.gen::<f64>() * 6.0;
            let model = EtaModel::PaperHalfBit;
            // Tangency.
            let u0 = surrogate_weight(x_t, x_t, gamma, s2, model);
            assert!((u0 - info_weight(gamma, s2, x_t, model)).abs() < 1e-14);
            // First-order contact: |u - y| <= L dx^2 locally, with L
            // estimated from second differences.
            let h = 1e-3;
            let l_est = ((info_weight(gamma, s2, x_t + h, model)
                - 2.0 * info_weight(gamma, s2, x_t, model)
                + info_weight(gamma, s2, x_t - h, model))
                / (h * h))
                .abs()
                + 1.0;
            for dx in [-0.05, -0.01, 0.01, 0.05] {
                let u = surrogate_weight(x_t + dx, x_t, gamma, s2, model);
                let y = info_weight(gamma, s2, x_t + dx, model);
                assert!(
                    (u - y).abs() <= 2.0 * l_est * dx * dx,
                    "dx {dx}: {} vs bound {}",
                    (u - y).abs(),
                    2.0 * l_est * dx * dx
                );
            }
        }
    }

    #[test]
    fn inner_solver_drives_w_to_floor_when_unconstrained() {
        // Huge eps: only the MAC constraints could keep W above 1, and with
        // tiny bits they do not bind.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let ctx = synth_ctx(&mut rng, 1, 2);
        let vars = VarList::build(&ctx, &[0]);
        let center = InnerPoint {
            x: DVector::from_vec(vec![0.5, 0.5]),
            w: 1.5,
            m: {
                let j = vars.fim_at(&DVector::from_vec(vec![0.5, 0.5]));
                let det = j[(0, 0)] * j[(1, 1)] - j[(0, 1)] * j[(1, 0)];
                [
                    j[(1, 1)] / det + 10.0,
                    -j[(0, 1)] / det,
                    j[(0, 0)] / det + 10.0,
                ]
            },
        };
        let prob = InnerProblem {
            b: vars.b.clone(),
            node_of: vars.node_of.clone(),
            n_nodes: 1,
            y_t: (0..2)
                .map(|i| info_weight(vars.gammas[i], vars.sigma2[i], center.x[i], ctx.eta_model))
                .collect(),
            dy_t: (0..2)
                .map(|i| {
                    info_weight_grad(vars.gammas[i], vars.sigma2[i], center.x[i], ctx.eta_model)
                })
                .collect(),
            caps: vec![8.0],
            eps: 1e6,
            mu_obj: 1e-3,
            mu_con: 1e-3,
            beta: 4.0,
            center,
        };
        let sol = solve_inner(&prob, &BarrierConfig::default()).unwrap();
        assert!(sol.point.w - 1.0 < 1e-6, "w {}", sol.point.w);
        assert!(barrier::feasibility_residual(&prob, &sol) <= 1e-9);
    }

    fn default_cfg() -> McscaConfig {
        McscaConfig::default()
    }

    #[test]
    fn mcsca_meets_budget_and_rounds_safely() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let ctx = synth_ctx_rank1(&mut rng, 3, 4);
        let bh = synth_backhaul(3, 6.0);
        let omega: Vec<usize> = vec![0, 1, 2];
        let eps_star = epsilon_star(&ctx, &omega).unwrap();
        let eps = 1.1 * eps_star;
        let run = mcsca_run(&ctx, &bh, &omega, eps, &default_cfg()).unwrap();
        assert!(run.converged, "iterations {}", run.iterations);
        assert!(run.iterations <= 80, "iterations {}", run.iterations);
        // Sandwich: relaxed tr(M) within [eps*, eps].
        assert!(run.allocation.relaxed_crlb >= eps_star * (1.0 - 1e-9));
        assert!(run.allocation.relaxed_crlb <= eps * (1.0 + 1e-9));
        // Rounding is monotone-safe.
        assert!(run.allocation.rounded_crlb <= eps * (1.0 + 1e-9));
        // Rounded bits satisfy the MAC constraints exactly at W*.
        let region = build_mac_region(&bh, &omega).unwrap();
        let totals: Vec<u64> = run
            .allocation
            .bits
            .iter()
            .map(|v| v.iter().map(|&b| b as u64).sum())
            .collect();
        let w = run.allocation.channel_uses;
        for mask in 1usize..8 {
            let tot: u64 = (0..3)
                .filter(|p| mask & (1 << p) != 0)
                .map(|p| totals[p])
                .sum();
            assert!(tot as f64 <= region.caps[mask - 1] * w as f64 * (1.0 + 1e-12));
        }
        assert_eq!(w, min_channel_uses(&totals, &region));
        // KKT residual of the relaxed problem is small at convergence.
        assert!(
            run.allocation.kkt_residual <= 1e-3,
            "kkt {}",
            run.allocation.kkt_residual
        );
    }

    #[test]
    fn mcsca_rejects_infeasible_epsilon() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let ctx = synth_ctx(&mut rng, 2, 3);
        let bh = synth_backhaul(2, 40.0);
        let eps_star = epsilon_star(&ctx, &[0, 1]).unwrap();
        assert!(matches!(
            mcsca_run(&ctx, &bh, &[0, 1], 0.5 * eps_star, &default_cfg()),
            Err(CoopError::InfeasibleEpsilon { .. })
        ));
    }

    #[test]
    fn greedy_single_node_and_w_dominance() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let ctx1 = synth_ctx(&mut rng, 1, 3);
        let bh1 = synth_backhaul(1, 40.0);
        let eps_star = epsilon_star(&ctx1, &[0]).unwrap();
        let out = greedy_select(&ctx1, &bh1, 2.0 * eps_star, &default_cfg()).unwrap();
        assert_eq!(out.allocation.omega, vec![0]);

        let ctx = synth_ctx_rank1(&mut rng, 4, 3);
        let bh = synth_backhaul(4, 6.0);
        let full: Vec<usize> = (0..4).collect();
        let eps = 2.0 * epsilon_star(&ctx, &full).unwrap();
        let full_run = mcsca_run(&ctx, &bh, &full, eps, &default_cfg()).unwrap();
        let sel = greedy_select(&ctx, &bh, eps, &default_cfg()).unwrap();
        assert!(sel.allocation.channel_uses <= full_run.allocation.channel_uses);
        assert!(sel.allocation.rounded_crlb <= eps * (1.0 + 1e-9));
    }

    /// Context mirroring the real pipeline structure: each node's projected
    /// Jacobian columns share one 2-D direction with rapidly decaying
    /// magnitudes (rank-one per node).
    fn synth_ctx_rank1(rng: &mut ChaCha12Rng, n_nodes: usize, dim: usize) -> FimContext {
        let receivers = (0..n_nodes)
            .map(|id| {
                let sigma2 = 0.8 + 0.4 * rng.gen::<f64>();
                let ang = rng.gen::<f64>() * std::f64::consts::TAU;
                let dir = [ang.cos(), ang.sin()];
                let mut projected = DMatrix::zeros(2, dim);
                for c in 0..dim {
                    let mag = (1.5 + rng.gen::<f64>()) * (-(c as f64)).exp();
                    projected[(0, c)] = dir[0] * mag;
                    projected[(1, c)] = dir[1] * mag;
                }
                let gammas = DVector::from_iterator(
                    dim,
                    (0..dim).map(|_| sigma2 / 2.0 + rng.gen::<f64>()),
                );
                ReceiverContext {
                    receiver_id: id,
                    jacobian: DMatrix::zeros(2, dim),
                    projected,
                    gammas,
                    sigma2,
                }
            })
            .collect();
        FimContext {
            receivers,
            eta_model: EtaModel::PaperHalfBit,
        }
    }

    #[test]
    fn mcsca_adversarial_structure_stays_feasible() {
        // Random full-rank projections admit first-order bit-swap cycles the
        // tangent surrogate cannot settle quickly; the run may hit the
        // iteration cap, but every returned allocation must still satisfy
        // the budget and the MAC region exactly.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let ctx = synth_ctx(&mut rng, 3, 4);
        let bh = synth_backhaul(3, 40.0);
        let omega: Vec<usize> = vec![0, 1, 2];
        let eps_star = epsilon_star(&ctx, &omega).unwrap();
        let mut cfg = default_cfg();
        cfg.max_iters = 40;
        let eps = 1.5 * eps_star;
        let run = mcsca_run(&ctx, &bh, &omega, eps, &cfg).unwrap();
        assert!(run.allocation.rounded_crlb <= eps * (1.0 + 1e-9));
        let region = build_mac_region(&bh, &omega).unwrap();
        let totals: Vec<u64> = run
            .allocation
            .bits
            .iter()
            .map(|v| v.iter().map(|&b| b as u64).sum())
            .collect();
        assert_eq!(run.allocation.channel_uses, min_channel_uses(&totals, &region));
    }

    #[test]
    fn bit_realloc_meets_budget() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        for trial in 0..5 {
            let ctx = synth_ctx_rank1(&mut rng, 3, 2);
            let bh = synth_backhaul(3, 6.0);
            let full: Vec<usize> = (0..3).collect();
            let eps = (1.2 + 0.4 * trial as f64) * epsilon_star(&ctx, &full).unwrap();
            let out = bit_realloc(&ctx, &bh, eps, &default_cfg()).unwrap();
            assert!(
                out.allocation.rounded_crlb <= eps,
                "crlb {} eps {eps}",
                out.allocation.rounded_crlb
            );
            // Unless the budget is met by prior information alone, every
            // kept node carries at least one bit.
            let any_bits = out
                .allocation
                .bits
                .iter()
                .any(|bits| bits.iter().any(|&b| b > 0));
            if any_bits {
                for bits in &out.allocation.bits {
                    assert!(bits.iter().any(|&b| b > 0));
                }
            }
        }
    }
}
