//! Feasible-start log-barrier solver for the per-iteration convex subproblem.
//!
//! Variables z = [X (m), W, m11, m12, m22, s]. The subproblem minimizes
//! W + mu ||x - x_t||^2 subject to
//!   tr(M) + mu ||x - x_t||^2 <= eps,
//!   Gbar(z) - s I4 >= 0 with s >= mu ||x - x_t||^2 (epigraph split),
//!   sum_{n in S} sum_j X_nj + mu W_t ||x - x_t||^2 <= C_S W for all S,
//!   ||X - X_t||^2 <= beta^2,  X >= 0,  W >= 1,
//! where Gbar stacks the auxiliary M against the tangent-surrogate FIM,
//! which is affine in X. Every constraint is convex; the LMI enters through
//! a log-det barrier and the scalars through log barriers, with Newton
//! steps, backtracking line search, and a x10 barrier-parameter schedule.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix2, Matrix4, Vector2};

use crate::error::{CoopError, Result};

/// Primal point of the subproblem (without the epigraph auxiliary).
#[derive(Debug, Clone)]
pub struct InnerPoint {
    pub x: DVector<f64>,
    pub w: f64,
    /// Symmetric 2x2 auxiliary matrix as [m11, m12, m22].
    pub m: [f64; 3],
}

impl InnerPoint {
    /// Distance in the vec(M)-consistent metric (off-diagonal counted twice).
    pub fn distance_sq(&self, other: &InnerPoint) -> f64 {
        let mut acc = (self.w - other.w).powi(2);
        acc += (self.m[0] - other.m[0]).powi(2);
        acc += 2.0 * (self.m[1] - other.m[1]).powi(2);
        acc += (self.m[2] - other.m[2]).powi(2);
        for i in 0..self.x.len() {
            acc += (self.x[i] - other.x[i]).powi(2);
        }
        acc
    }

    pub fn norm(&self) -> f64 {
        let zero = InnerPoint {
            x: DVector::zeros(self.x.len()),
            w: 0.0,
            m: [0.0; 3],
        };
        self.distance_sq(&zero).sqrt()
    }
}

/// Convex subproblem data at one SCA iteration.
pub struct InnerProblem {
    /// Per-variable projected Jacobian columns (2-vectors).
    pub b: Vec<Vector2<f64>>,
    /// Variable -> node position (within the selected set).
    pub node_of: Vec<usize>,
    pub n_nodes: usize,
    /// Tangent value and slope of the info weight at the center.
    pub y_t: Vec<f64>,
    pub dy_t: Vec<f64>,
    /// Subset capacities, caps[mask - 1] for mask over node positions.
    pub caps: Vec<f64>,
    pub eps: f64,
    /// Proximal weight in the objective (strong convexity floor).
    pub mu_obj: f64,
    /// Proximal weight in the constraints; sized to majorize the
    /// tangent-surrogate error of the FIM.
    pub mu_con: f64,
    pub beta: f64,
    pub center: InnerPoint,
}

#[derive(Debug, Clone)]
pub struct BarrierConfig {
    pub gap_target: f64,
    pub t_init: f64,
    pub t_mult: f64,
    /// Newton decrement^2 / 2 threshold.
    pub newton_tol: f64,
    pub max_newton_per_stage: usize,
    pub armijo: f64,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        Self {
            gap_target: 1e-8,
            // SCA centers are close to each subproblem's optimum, so the
            // path can start at a fairly cold... high barrier weight.
            t_init: 1.0,
            t_mult: 10.0,
            newton_tol: 1e-8,
            max_newton_per_stage: 80,
            armijo: 0.25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub point: InnerPoint,
    pub s: f64,
    /// Duality-gap surrogate m_total / t at exit.
    pub gap: f64,
    pub newton_steps: usize,
    /// Subproblem objective W + mu ||x - x_t||^2.
    pub objective: f64,
}

impl InnerProblem {
    pub fn m_vars(&self) -> usize {
        self.b.len()
    }

    fn dim(&self) -> usize {
        self.m_vars() + 5
    }

    /// Surrogate FIM at bit vector X (affine tangent form).
    pub fn surrogate_fim(&self, x: &DVector<f64>) -> Matrix2<f64> {
        let mut j = Matrix2::zeros();
        for i in 0..self.m_vars() {
            let u = self.y_t[i] + self.dy_t[i] * (x[i] - self.center.x[i]);
            let b = &self.b[i];
            j[(0, 0)] += u * b[0] * b[0];
            j[(0, 1)] += u * b[0] * b[1];
            j[(1, 1)] += u * b[1] * b[1];
        }
        j[(1, 0)] = j[(0, 1)];
        j
    }

    /// Gbar(z) - s I4.
    fn lmi_matrix(&self, z: &DVector<f64>) -> Matrix4<f64> {
        let m = self.m_vars();
        let x = z.rows(0, m).into_owned();
        let j = self.surrogate_fim(&x);
        let (m11, m12, m22, s) = (z[m + 1], z[m + 2], z[m + 3], z[m + 4]);
        Matrix4::new(
            m11 - s,
            m12,
            1.0,
            0.0,
            m12,
            m22 - s,
            0.0,
            1.0,
            1.0,
            0.0,
            j[(0, 0)] - s,
            j[(0, 1)],
            0.0,
            1.0,
            j[(1, 0)],
            j[(1, 1)] - s,
        )
    }

    /// Proximal distance ||x - x_t||^2 in vec(M) metric (s excluded).
    fn prox(&self, z: &DVector<f64>) -> f64 {
        let m = self.m_vars();
        let mut acc = 0.0;
        for i in 0..m {
            acc += (z[i] - self.center.x[i]).powi(2);
        }
        acc += (z[m] - self.center.w).powi(2);
        acc += (z[m + 1] - self.center.m[0]).powi(2);
        acc += 2.0 * (z[m + 2] - self.center.m[1]).powi(2);
        acc += (z[m + 3] - self.center.m[2]).powi(2);
        acc
    }

    /// Gradient of prox (including the zero s slot).
    fn prox_grad(&self, z: &DVector<f64>, out: &mut DVector<f64>) {
        let m = self.m_vars();
        out.fill(0.0);
        for i in 0..m {
            out[i] = 2.0 * (z[i] - self.center.x[i]);
        }
        out[m] = 2.0 * (z[m] - self.center.w);
        out[m + 1] = 2.0 * (z[m + 1] - self.center.m[0]);
        out[m + 2] = 4.0 * (z[m + 2] - self.center.m[1]);
        out[m + 3] = 2.0 * (z[m + 3] - self.center.m[2]);
        out[m + 4] = 0.0;
    }

    /// Diagonal of the prox Hessian (constant).
    fn prox_hess_diag(&self) -> DVector<f64> {
        let m = self.m_vars();
        let mut d = DVector::from_element(self.dim(), 2.0);
        d[m + 2] = 4.0;
        d[m + 4] = 0.0;
        d
    }

    /// Per-node totals of the X block.
    fn node_totals(&self, z: &DVector<f64>) -> Vec<f64> {
        let mut tot = vec![0.0; self.n_nodes];
        for i in 0..self.m_vars() {
            tot[self.node_of[i]] += z[i];
        }
        tot
    }

    /// All scalar constraint values g_k(z) <= 0, in fixed order:
    /// [trace, masks.., trust, epigraph, w-bound, x-bounds..].
    fn scalar_constraints(&self, z: &DVector<f64>, out: &mut Vec<f64>) {
        out.clear();
        let m = self.m_vars();
        let prox = self.prox(z);
        let w = z[m];
        out.push(z[m + 1] + z[m + 3] + self.mu_con * prox - self.eps);
        let totals = self.node_totals(z);
        for mask in 1..=(self.caps.len()) {
            let mut sum = 0.0;
            for (p, t) in totals.iter().enumerate() {
                if mask & (1 << p) != 0 {
                    sum += t;
                }
            }
            out.push(sum + self.mu_con * self.center.w * prox - self.caps[mask - 1] * w);
        }
        let mut trust = 0.0;
        for i in 0..m {
            trust += (z[i] - self.center.x[i]).powi(2);
        }
        out.push(trust - self.beta * self.beta);
        out.push(self.mu_con * prox - z[m + 4]);
        out.push(1.0 - w);
        for i in 0..m {
            out.push(-z[i]);
        }
    }

    fn objective(&self, z: &DVector<f64>) -> f64 {
        z[self.m_vars()] + self.mu_obj * self.prox(z)
    }

    /// Total barrier complexity: scalar constraints plus the LMI dimension.
    fn barrier_complexity(&self) -> f64 {
        (1 + self.caps.len() + 3 + self.m_vars() + 4) as f64
    }
}

/// Strict feasibility check; returns the LMI Cholesky when feasible.
fn domain_check(prob: &InnerProblem, z: &DVector<f64>, scratch: &mut Vec<f64>) -> Option<Cholesky<f64, nalgebra::Const<4>>> {
    prob.scalar_constraints(z, scratch);
    if scratch.iter().any(|&g| g >= 0.0) {
        return None;
    }
    Cholesky::new(prob.lmi_matrix(z))
}

/// Barrier objective t f0 + Phi; None outside the domain.
fn barrier_value(prob: &InnerProblem, z: &DVector<f64>, t: f64, scratch: &mut Vec<f64>) -> Option<f64> {
    let chol = domain_check(prob, z, scratch)?;
    let mut val = t * prob.objective(z);
    // -log det A via the Cholesky factor.
    let l = chol.l();
    let mut logdet = 0.0;
    for i in 0..4 {
        logdet += l[(i, i)].ln();
    }
    val -= 2.0 * logdet;
    for &g in scratch.iter() {
        val -= (-g).ln();
    }
    Some(val)
}

/// One barrier centering: Newton with backtracking at fixed t.
#[allow(clippy::too_many_arguments)]
fn center(
    prob: &InnerProblem,
    z: &mut DVector<f64>,
    t: f64,
    cfg: &BarrierConfig,
    newton_tol: f64,
    scratch: &mut Vec<f64>,
    grad: &mut DVector<f64>,
    hess: &mut DMatrix<f64>,
    steps_used: &mut usize,
) -> Result<()> {
    let dim = prob.dim();
    let m = prob.m_vars();
    let prox_diag = prob.prox_hess_diag();
    let mut prox_g = DVector::zeros(dim);
    let mut e_flat: Vec<[f64; 16]> = Vec::with_capacity(dim);

    for _ in 0..cfg.max_newton_per_stage {
        *steps_used += 1;
        let chol = domain_check(prob, z, scratch)
            .ok_or_else(|| CoopError::SolverNumerical("iterate left the barrier domain".into()))?;
        let a_inv = chol.inverse();

        prob.prox_grad(z, &mut prox_g);
        grad.fill(0.0);
        hess.fill(0.0);

        // Objective: t (e_W + mu prox_grad), Hessian t * 2 mu diag.
        grad[m] += t;
        for i in 0..dim {
            grad[i] += t * prob.mu_obj * prox_g[i];
        }
        let mut shared_diag_coef = t * prob.mu_obj;

        // Scalar constraints. Order matches scalar_constraints().
        let mut k = 0usize;
        // Accumulate rank-one terms into the upper triangle only; the full
        // matrix is mirrored once after assembly.
        let add_rank_one = |hess: &mut DMatrix<f64>, gvec: &DVector<f64>, scale: f64| {
            let g = gvec.as_slice();
            let h = hess.as_mut_slice();
            for a in 0..dim {
                let ga = scale * g[a];
                if ga == 0.0 {
                    continue;
                }
                let col = &mut h[a * dim..a * dim + a + 1];
                for (bcol, hv) in col.iter_mut().enumerate() {
                    *hv += ga * g[bcol];
                }
            }
        };

        // Trace constraint.
        {
            let g = scratch[k];
            k += 1;
            let inv = -1.0 / g;
            let mut gv = &prox_g * prob.mu_con;
            gv[m + 1] += 1.0;
            gv[m + 3] += 1.0;
            for i in 0..dim {
                grad[i] += inv * gv[i];
            }
            add_rank_one(hess, &gv, 1.0 / (g * g));
            shared_diag_coef += inv * prob.mu_con;
        }
        // MAC constraints.
        for mask in 1..=prob.caps.len() {
            let g = scratch[k];
            k += 1;
            let inv = -1.0 / g;
            let mut gv = &prox_g * (prob.mu_con * prob.center.w);
            for i in 0..m {
                if mask & (1 << prob.node_of[i]) != 0 {
                    gv[i] += 1.0;
                }
            }
            gv[m] -= prob.caps[mask - 1];
            for i in 0..dim {
                grad[i] += inv * gv[i];
            }
            add_rank_one(hess, &gv, 1.0 / (g * g));
            shared_diag_coef += inv * prob.mu_con * prob.center.w;
        }
        // Trust region (X block only).
        {
            let g = scratch[k];
            k += 1;
            let inv = -1.0 / g;
            let mut gv = DVector::zeros(dim);
            for i in 0..m {
                gv[i] = 2.0 * (z[i] - prob.center.x[i]);
            }
            for i in 0..dim {
                grad[i] += inv * gv[i];
            }
            add_rank_one(hess, &gv, 1.0 / (g * g));
            for i in 0..m {
                hess[(i, i)] += inv * 2.0;
            }
        }
        // Epigraph: mu prox - s <= 0.
        {
            let g = scratch[k];
            k += 1;
            let inv = -1.0 / g;
            let mut gv = &prox_g * prob.mu_con;
            gv[m + 4] -= 1.0;
            for i in 0..dim {
                grad[i] += inv * gv[i];
            }
            add_rank_one(hess, &gv, 1.0 / (g * g));
            shared_diag_coef += inv * prob.mu_con;
        }
        // W >= 1.
        {
            let g = scratch[k];
            k += 1;
            grad[m] += 1.0 / (-g) * (-1.0);
            hess[(m, m)] += 1.0 / (g * g);
        }
        // X >= 0 bounds.
        for i in 0..m {
            let g = scratch[k];
            k += 1;
            grad[i] += 1.0 / (-g) * (-1.0);
            hess[(i, i)] += 1.0 / (g * g);
        }
        debug_assert_eq!(k, scratch.len());

        // Shared prox-Hessian diagonal from objective/trace/MAC/epigraph.
        for i in 0..dim {
            hess[(i, i)] += shared_diag_coef * prox_diag[i];
        }

        // LMI term: gradient -tr(A^{-1} D_k), Hessian tr(A^{-1} D_k A^{-1} D_l).
        // E_k = A^{-1} D_k as flat 4x4 row-major arrays.
        e_flat.clear();
        for i in 0..dim {
            let d = lmi_direction(prob, i);
            let e = a_inv * d;
            let mut flat = [0.0f64; 16];
            let mut tr = 0.0;
            for r in 0..4 {
                for c in 0..4 {
                    flat[r * 4 + c] = e[(r, c)];
                }
                tr += e[(r, r)];
            }
            grad[i] -= tr;
            e_flat.push(flat);
        }
        {
            let h = hess.as_mut_slice();
            for (i, ei) in e_flat.iter().enumerate() {
                for (j, ej) in e_flat.iter().enumerate().take(i + 1) {
                    let mut acc = 0.0;
                    for a in 0..4 {
                        for bcol in 0..4 {
                            acc += ei[a * 4 + bcol] * ej[bcol * 4 + a];
                        }
                    }
                    // Column-major: entry (j, i) with j <= i lives in the
                    // upper triangle of column i.
                    h[i * dim + j] += acc;
                }
            }
        }
        // Mirror the upper triangle.
        {
            let h = hess.as_mut_slice();
            for i in 0..dim {
                for j in 0..i {
                    h[j * dim + i] = h[i * dim + j];
                }
            }
        }

        // Newton direction.
        let mut step = None;
        let mut ridge = 0.0;
        for attempt in 0..4 {
            let mut h = hess.clone();
            if ridge > 0.0 {
                for i in 0..dim {
                    h[(i, i)] += ridge;
                }
            }
            if let Some(ch) = Cholesky::new(h) {
                step = Some(ch.solve(&(-grad.clone())));
                break;
            }
            ridge = if attempt == 0 {
                1e-12 * hess.diagonal().amax()
            } else {
                ridge * 100.0
            };
        }
        let dir = step.ok_or_else(|| {
            CoopError::SolverNumerical("Newton system not positive definite".into())
        })?;
        if dir.iter().any(|v| !v.is_finite()) {
            return Err(CoopError::SolverNumerical("non-finite Newton step".into()));
        }
        let decrement_sq = -grad.dot(&dir);
        if decrement_sq <= 2.0 * newton_tol {
            return Ok(());
        }

        // Backtracking with domain + Armijo checks.
        let base = barrier_value(prob, z, t, scratch)
            .ok_or_else(|| CoopError::SolverNumerical("left domain at line search".into()))?;
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = &*z + &dir * alpha;
            if let Some(val) = barrier_value(prob, &cand, t, scratch) {
                if val <= base - cfg.armijo * alpha * decrement_sq {
                    *z = cand;
                    moved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !moved {
            // Step stalled at numerical precision: accept current center.
            return Ok(());
        }
    }
    Ok(())
}

/// Direction matrix D_k = dA/dz_k (A is affine in z).
fn lmi_direction(prob: &InnerProblem, k: usize) -> Matrix4<f64> {
    let m = prob.m_vars();
    let mut d = Matrix4::zeros();
    if k < m {
        let b = &prob.b[k];
        let s = prob.dy_t[k];
        d[(2, 2)] = s * b[0] * b[0];
        d[(2, 3)] = s * b[0] * b[1];
        d[(3, 2)] = s * b[1] * b[0];
        d[(3, 3)] = s * b[1] * b[1];
    } else if k == m + 1 {
        d[(0, 0)] = 1.0;
    } else if k == m + 2 {
        d[(0, 1)] = 1.0;
        d[(1, 0)] = 1.0;
    } else if k == m + 3 {
        d[(1, 1)] = 1.0;
    } else if k == m + 4 {
        d[(0, 0)] = -1.0;
        d[(1, 1)] = -1.0;
        d[(2, 2)] = -1.0;
        d[(3, 3)] = -1.0;
    }
    // k == m (the W variable) does not enter the LMI.
    d
}

/// Solves the subproblem from the strictly feasible center.
pub fn solve_inner(prob: &InnerProblem, cfg: &BarrierConfig) -> Result<InnerSolution> {
    let m = prob.m_vars();
    let dim = prob.dim();
    let mut z = DVector::zeros(dim);
    for i in 0..m {
        z[i] = prob.center.x[i];
    }
    z[m] = prob.center.w;
    z[m + 1] = prob.center.m[0];
    z[m + 2] = prob.center.m[1];
    z[m + 3] = prob.center.m[2];
    // Pick s strictly between 0 and lambda_min(Gbar(center)).
    let g0 = prob.lmi_matrix(&{
        let mut zz = z.clone();
        zz[m + 4] = 0.0;
        zz
    });
    let eig = nalgebra::SymmetricEigen::new(g0);
    let lambda_min = eig.eigenvalues.amin();
    if !(lambda_min > 0.0) {
        return Err(CoopError::RestorationRequired(format!(
            "center LMI margin {lambda_min}"
        )));
    }
    z[m + 4] = 0.5 * lambda_min;

    let mut scratch = Vec::new();
    if domain_check(prob, &z, &mut scratch).is_none() {
        let worst = scratch
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        return Err(CoopError::RestorationRequired(format!(
            "center scalar residual {worst}"
        )));
    }

    let m_total = prob.barrier_complexity();
    let mut t = cfg.t_init;
    let mut grad = DVector::zeros(dim);
    let mut hess = DMatrix::zeros(dim, dim);
    let mut steps = 0usize;
    loop {
        center(prob, &mut z, t, cfg, cfg.newton_tol, &mut scratch, &mut grad, &mut hess, &mut steps)?;
        if m_total / t <= cfg.gap_target {
            break;
        }
        t *= cfg.t_mult;
    }

    let point = InnerPoint {
        x: z.rows(0, m).into_owned(),
        w: z[m],
        m: [z[m + 1], z[m + 2], z[m + 3]],
    };
    let objective = prob.objective(&z);
    Ok(InnerSolution {
        point,
        s: z[m + 4],
        gap: m_total / t,
        newton_steps: steps,
        objective,
    })
}

/// Worst violation of the subproblem constraints at a point (0 when inside).
pub fn feasibility_residual(prob: &InnerProblem, sol: &InnerSolution) -> f64 {
    let m = prob.m_vars();
    let dim = prob.dim();
    let mut z = DVector::zeros(dim);
    for i in 0..m {
        z[i] = sol.point.x[i];
    }
    z[m] = sol.point.w;
    z[m + 1] = sol.point.m[0];
    z[m + 2] = sol.point.m[1];
    z[m + 3] = sol.point.m[2];
    z[m + 4] = sol.s;
    let mut scratch = Vec::new();
    prob.scalar_constraints(&z, &mut scratch);
    let mut worst = scratch.iter().cloned().fold(0.0, f64::max);
    let eig = nalgebra::SymmetricEigen::new(prob.lmi_matrix(&z));
    worst = worst.max(-eig.eigenvalues.amin());
    worst
}
