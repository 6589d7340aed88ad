//! Lawson-Hanson non-negative least squares, used to recover KKT multipliers.

use nalgebra::{DMatrix, DVector};

/// Solves min ||A x - b|| subject to x >= 0.
///
/// Classic active-set scheme; the problem sizes here (a few dozen columns)
/// make the dense inner least-squares solves cheap.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>, max_iter: usize) -> DVector<f64> {
    let n = a.ncols();
    let mut passive = vec![false; n];
    let mut x = DVector::zeros(n);
    if n == 0 {
        return x;
    }
    let mut resid = b - a * &x;
    for _ in 0..max_iter {
        // Most-positive gradient among the active (zero) set.
        let grad = a.transpose() * &resid;
        let mut best = None;
        let mut best_val = 1e-10 * (1.0 + b.norm());
        for j in 0..n {
            if !passive[j] && grad[j] > best_val {
                best_val = grad[j];
                best = Some(j);
            }
        }
        let Some(j_new) = best else { break };
        passive[j_new] = true;

        // Inner loop: least squares on the passive set, stepping back when a
        // passive coefficient would go negative.
        loop {
            let cols: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let sub = DMatrix::from_columns(&cols.iter().map(|&j| a.column(j)).collect::<Vec<_>>());
            let sol = sub
                .clone()
                .svd(true, true)
                .solve(b, 1e-12)
                .unwrap_or_else(|_| DVector::zeros(cols.len()));
            if sol.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (idx, &j) in cols.iter().enumerate() {
                    x[j] = sol[idx];
                }
                break;
            }
            // Step toward sol until the first coefficient hits zero.
            let mut alpha = f64::INFINITY;
            for (idx, &j) in cols.iter().enumerate() {
                if sol[idx] <= 0.0 {
                    let denom = x[j] - sol[idx];
                    if denom > 1e-300 {
                        alpha = alpha.min(x[j] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            let alpha = alpha.clamp(0.0, 1.0);
            for (idx, &j) in cols.iter().enumerate() {
                x[j] += alpha * (sol[idx] - x[j]);
                if x[j] <= 1e-14 {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
        resid = b - a * &x;
    }
    x
}
