//! Discrete optimal transport between neuron measures.
//!
//! A measure puts mass on each neuron of one adapter layer; its support is
//! either the neuron's incoming weights (plus bias) or an activation
//! statistic collected on a probe batch. Couplings between two such
//! measures become alignment matrices that reorder one adapter's neurons to
//! match the other's.

mod assignment;
mod flow;
mod sinkhorn;

pub use assignment::solve_assignment;
pub use sinkhorn::SinkhornOutcome;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActivationCache, AdapterLayer};
use crate::numerics::{matmul, pairwise_euclidean, Matrix};

/// Tolerance on marginal totals and plan feasibility.
pub const MARGINAL_TOL: f64 = 1e-9;

/// Discrete probability measure over the neurons of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronMeasure {
    pub mass: Vec<f64>,
    pub support: Matrix,
}

impl NeuronMeasure {
    pub fn new(mass: Vec<f64>, support: Matrix) -> Result<Self> {
        if mass.len() != support.rows() {
            return Err(Error::shape(format!(
                "{} masses for {} support rows",
                mass.len(),
                support.rows()
            )));
        }
        if mass.iter().any(|&m| !(m >= 0.0)) {
            return Err(Error::numeric("negative or NaN neuron mass"));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::numeric(format!("masses sum to {total}, not 1")));
        }
        Ok(Self { mass, support })
    }

    /// Uniform mass `1/n` on each support row.
    pub fn uniform(support: Matrix) -> Self {
        let n = support.rows();
        Self {
            mass: vec![1.0 / n as f64; n],
            support,
        }
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }
}

/// Euclidean ground cost between the supports of two measures.
pub fn ground_cost(from: &NeuronMeasure, to: &NeuronMeasure) -> Result<Matrix> {
    pairwise_euclidean(&from.support, &to.support)
}

/// A coupling together with its marginals and realized cost.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    pub cost: f64,
}

impl TransportPlan {
    fn new(plan: Matrix, cost: &Matrix, alpha: &[f64], beta: &[f64]) -> Self {
        let realized = plan
            .as_slice()
            .iter()
            .zip(cost.as_slice())
            .map(|(p, c)| p * c)
            .sum();
        Self {
            plan,
            row_marginal: alpha.to_vec(),
            col_marginal: beta.to_vec(),
            cost: realized,
        }
    }

    /// Largest absolute deviation of the plan's row and column sums from
    /// the stored marginals.
    pub fn marginal_violation(&self) -> f64 {
        let rows = self.plan.row_sums();
        let cols = self.plan.column_sums();
        rows.iter()
            .zip(&self.row_marginal)
            .chain(cols.iter().zip(&self.col_marginal))
            .map(|(s, t)| (s - t).abs())
            .fold(0.0, f64::max)
    }

    /// Identity coupling with uniform marginals on `n` neurons.
    pub fn identity(n: usize) -> Self {
        let w = 1.0 / n as f64;
        let mut plan = Matrix::zeros(n, n);
        for i in 0..n {
            plan[(i, i)] = w;
        }
        Self {
            plan,
            row_marginal: vec![w; n],
            col_marginal: vec![w; n],
            cost: 0.0,
        }
    }

    /// For hard plans: `Some(perm)` with `perm[i] = j` when row `i` sends
    /// all its mass to column `j`.
    pub fn as_permutation(&self) -> Option<Vec<usize>> {
        let (n, m) = self.plan.shape();
        if n != m {
            return None;
        }
        let mut perm = Vec::with_capacity(n);
        let mut seen = vec![false; m];
        for i in 0..n {
            let nz: Vec<usize> = (0..m).filter(|&j| self.plan[(i, j)] > 0.0).collect();
            if nz.len() != 1 || seen[nz[0]] {
                return None;
            }
            seen[nz[0]] = true;
            perm.push(nz[0]);
        }
        Some(perm)
    }
}

/// Which projection of an adapter layer a weight support describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    /// Bottleneck neurons; incoming weights are the columns of `w_down`.
    Down,
    /// Output neurons; incoming weights are the columns of `w_up`.
    Up,
}

/// Support rows for the neurons of one projection: row `i` is neuron `i`'s
/// incoming weights post-multiplied by `adjustment` (the previous layer's
/// normalized alignment), with the bias appended as a last coordinate.
pub fn weight_support(
    layer: &AdapterLayer,
    which: Projection,
    adjustment: &Matrix,
) -> Result<Matrix> {
    let (incoming, bias) = match which {
        Projection::Down => (layer.w_down.transpose(), &layer.b_down),
        Projection::Up => (layer.w_up.transpose(), &layer.b_up),
    };
    if adjustment.rows() != incoming.cols() {
        return Err(Error::shape(format!(
            "adjustment {:?} does not fit incoming dimension {}",
            adjustment.shape(),
            incoming.cols()
        )));
    }
    matmul(&incoming, adjustment)?.append_column(bias)
}

/// How activation statistics become a support.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationMode {
    /// One scalar per neuron: its mean pre-activation over the batch.
    #[default]
    Mean,
    /// One coordinate per probe sample.
    PerSample,
}

/// Bottleneck-neuron supports from recorded pre-activations of
/// `layer_index`: `b × 1` in mean mode, `b × m` in per-sample mode.
pub fn activation_support(
    cache: &ActivationCache,
    layer_index: usize,
    mode: ActivationMode,
) -> Result<Matrix> {
    let layer = cache.layers.get(layer_index).ok_or_else(|| {
        Error::shape(format!(
            "layer {layer_index} not in a cache of {} layers",
            cache.layers.len()
        ))
    })?;
    let samples = layer.pre.rows();
    if samples == 0 {
        return Err(Error::data("activation support needs at least one sample"));
    }
    match mode {
        ActivationMode::Mean => {
            let sums = layer.pre.column_sums();
            Matrix::column(&sums.iter().map(|s| s / samples as f64).collect::<Vec<_>>())
        }
        ActivationMode::PerSample => Ok(layer.pre.transpose()),
    }
}

fn check_marginals(cost: &Matrix, alpha: &[f64], beta: &[f64]) -> Result<()> {
    if cost.rows() != alpha.len() || cost.cols() != beta.len() {
        return Err(Error::shape(format!(
            "cost {:?} against marginals of length {} and {}",
            cost.shape(),
            alpha.len(),
            beta.len()
        )));
    }
    if alpha.iter().chain(beta).any(|&w| !(w >= 0.0)) {
        return Err(Error::numeric("marginals must be nonnegative"));
    }
    let (sa, sb) = (alpha.iter().sum::<f64>(), beta.iter().sum::<f64>());
    if (sa - sb).abs() > MARGINAL_TOL {
        return Err(Error::numeric(format!(
            "infeasible marginals: totals {sa} and {sb}"
        )));
    }
    if cost.as_slice().iter().any(|&c| !c.is_finite() || c < 0.0) {
        return Err(Error::numeric("cost must be finite and nonnegative"));
    }
    Ok(())
}

fn is_uniform(w: &[f64]) -> bool {
    let u = 1.0 / w.len() as f64;
    w.iter().all(|&x| (x - u).abs() <= 1e-12)
}

/// Exact optimal coupling. Square problems with uniform marginals are
/// solved as a linear assignment, giving `n·plan` as a 0/1 permutation
/// matrix; everything else goes through min-cost flow.
pub fn solve_exact(cost: &Matrix, alpha: &[f64], beta: &[f64]) -> Result<TransportPlan> {
    check_marginals(cost, alpha, beta)?;
    let (n, m) = cost.shape();
    let plan = if n == m && n > 0 && is_uniform(alpha) && is_uniform(beta) {
        let assignment = solve_assignment(cost);
        let mut plan = Matrix::zeros(n, n);
        for (i, &j) in assignment.iter().enumerate() {
            plan[(i, j)] = beta[j];
        }
        plan
    } else {
        flow::min_cost_transport(cost, alpha, beta)
    };
    Ok(TransportPlan::new(plan, cost, alpha, beta))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornParams {
    /// Entropic regularization; `None` means `0.01 · mean(cost)`.
    pub epsilon: Option<f64>,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            epsilon: None,
            max_iters: 2000,
            tol: 1e-9,
        }
    }
}

/// Entropic coupling `diag(u)·exp(−C/ε)·diag(v)`, rounded onto the exact
/// marginals. Non-convergence is reported in the outcome, not raised.
pub fn solve_sinkhorn(
    cost: &Matrix,
    alpha: &[f64],
    beta: &[f64],
    params: SinkhornParams,
) -> Result<(TransportPlan, SinkhornOutcome)> {
    check_marginals(cost, alpha, beta)?;
    let epsilon = match params.epsilon {
        Some(e) => e,
        None => {
            let mean = cost.mean();
            if mean > 0.0 {
                0.01 * mean
            } else {
                1.0
            }
        }
    };
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::numeric(format!("epsilon must be positive, got {epsilon}")));
    }
    let outcome = sinkhorn::log_sinkhorn(cost, alpha, beta, epsilon, params.max_iters, params.tol);
    let plan = TransportPlan::new(outcome.plan.clone(), cost, alpha, beta);
    Ok((plan, outcome))
}

/// `diag(1/β)·Pᵀ`: maps the source layer's neuron coordinates onto the
/// target's. For hard uniform plans this is a permutation matrix.
pub fn plan_to_alignment(plan: &TransportPlan) -> Result<Matrix> {
    let (n, m) = plan.plan.shape();
    if plan.col_marginal.len() != m {
        return Err(Error::shape("column marginal length differs from plan width"));
    }
    let mut out = Matrix::zeros(m, n);
    for j in 0..m {
        let b = plan.col_marginal[j];
        if b == 0.0 {
            return Err(Error::numeric(format!("zero column marginal at {j}")));
        }
        for i in 0..n {
            out[(j, i)] = plan.plan[(i, j)] / b;
        }
    }
    Ok(out)
}
