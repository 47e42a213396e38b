//! Entropic OT in the log domain, followed by a rounding pass that puts the
//! returned coupling exactly on the marginal constraints.

use crate::numerics::{log_sum_exp, Matrix};

#[derive(Clone, Debug)]
pub struct SinkhornOutcome {
    pub plan: Matrix,
    pub iterations: usize,
    pub converged: bool,
    /// L1 row-marginal violation before rounding.
    pub marginal_error: f64,
}

pub(crate) fn log_sinkhorn(
    cost: &Matrix,
    alpha: &[f64],
    beta: &[f64],
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> SinkhornOutcome {
    let (n, m) = cost.shape();
    let log_a: Vec<f64> = alpha.iter().map(|a| a.ln()).collect();
    let log_b: Vec<f64> = beta.iter().map(|b| b.ln()).collect();
    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; m];
    let mut scratch_row = vec![0.0f64; m];
    let mut scratch_col = vec![0.0f64; n];

    let mut iterations = 0;
    let mut converged = false;
    let mut marginal_error = f64::INFINITY;
    while iterations < max_iters {
        iterations += 1;
        for i in 0..n {
            for j in 0..m {
                scratch_row[j] = (g[j] - cost[(i, j)]) / epsilon;
            }
            f[i] = epsilon * (log_a[i] - log_sum_exp(&scratch_row));
        }
        for j in 0..m {
            for i in 0..n {
                scratch_col[i] = (f[i] - cost[(i, j)]) / epsilon;
            }
            g[j] = epsilon * (log_b[j] - log_sum_exp(&scratch_col));
        }
        // Columns are exact after the g-update; measure the rows.
        marginal_error = (0..n)
            .map(|i| {
                let row: f64 = (0..m)
                    .map(|j| ((f[i] + g[j] - cost[(i, j)]) / epsilon).exp())
                    .sum();
                (row - alpha[i]).abs()
            })
            .sum();
        if marginal_error < tol {
            converged = true;
            break;
        }
    }

    let mut plan = Matrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let v = ((f[i] + g[j] - cost[(i, j)]) / epsilon).exp();
            plan[(i, j)] = if v.is_finite() { v } else { 0.0 };
        }
    }
    round_to_marginals(&mut plan, alpha, beta);

    SinkhornOutcome {
        plan,
        iterations,
        converged,
        marginal_error,
    }
}

/// Scales rows and columns down to their targets and spreads the leftover
/// mass as a rank-one correction.
fn round_to_marginals(plan: &mut Matrix, alpha: &[f64], beta: &[f64]) {
    let (n, m) = plan.shape();
    let rows = plan.row_sums();
    for i in 0..n {
        let x = if rows[i] > 0.0 {
            (alpha[i] / rows[i]).min(1.0)
        } else {
            0.0
        };
        plan.row_mut(i).iter_mut().for_each(|v| *v *= x);
    }
    let cols = plan.column_sums();
    for j in 0..m {
        let y = if cols[j] > 0.0 {
            (beta[j] / cols[j]).min(1.0)
        } else {
            0.0
        };
        for i in 0..n {
            plan[(i, j)] *= y;
        }
    }
    let row_gap: Vec<f64> = plan
        .row_sums()
        .iter()
        .zip(alpha)
        .map(|(r, a)| (a - r).max(0.0))
        .collect();
    let col_gap: Vec<f64> = plan
        .column_sums()
        .iter()
        .zip(beta)
        .map(|(c, b)| (b - c).max(0.0))
        .collect();
    let total: f64 = col_gap.iter().sum();
    if total > 0.0 {
        for i in 0..n {
            for j in 0..m {
                plan[(i, j)] += row_gap[i] * col_gap[j] / total;
            }
        }
    }
}
