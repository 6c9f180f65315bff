//! Entropic optimal transport: cosine cost matrix and log-domain Sinkhorn.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sinkhorn solver parameters, exposed in the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    pub reg: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            reg: 0.05,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

/// An entropically regularized transport problem.
#[derive(Debug, Clone)]
pub struct TransportProblem {
    pub cost: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
    pub entropic_reg: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl TransportProblem {
    /// Uniform marginals over the cost matrix's rows and columns.
    pub fn uniform(cost: Array2<f64>, cfg: &SinkhornConfig) -> Self {
        let (ta, tb) = cost.dim();
        TransportProblem {
            cost,
            row_marginal: Array1::from_elem(ta, 1.0 / ta as f64),
            col_marginal: Array1::from_elem(tb, 1.0 / tb as f64),
            entropic_reg: cfg.reg,
            max_iters: cfg.max_iters,
            tol: cfg.tol,
        }
    }
}

/// A solved (or best-effort) transport plan.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    /// ⟨T, C⟩ without the entropy term.
    pub objective: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

/// Pairwise cosine distance between rows of two prediction matrices.
///
/// `C[i][j] = 1 − ⟨p_i, q_j⟩ / (‖p_i‖‖q_j‖ + 1e-12)`, entries in [0, 2].
pub fn cosine_cost(pred_a: &Array2<f64>, pred_b: &Array2<f64>) -> Result<Array2<f64>> {
    if pred_a.dim().1 != pred_b.dim().1 {
        return Err(Error::Shape {
            context: "cosine_cost class dimension".into(),
            expected: format!("{}", pred_a.dim().1),
            got: format!("{}", pred_b.dim().1),
        });
    }
    const EPS: f64 = 1e-12;
    let (ta, tb) = (pred_a.dim().0, pred_b.dim().0);
    let norms_a: Vec<f64> = pred_a.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let norms_b: Vec<f64> = pred_b.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut cost = Array2::zeros((ta, tb));
    for i in 0..ta {
        let pi = pred_a.row(i);
        for j in 0..tb {
            let dot = pi.dot(&pred_b.row(j));
            cost[[i, j]] = 1.0 - dot / (norms_a[i] * norms_b[j] + EPS);
        }
    }
    Ok(cost)
}

fn log_sum_exp_iter<I: Iterator<Item = f64>>(it: I) -> f64 {
    let vals: Vec<f64> = it.collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Solve the entropic OT problem by alternating row/column scaling in the
/// log domain. On non-convergence the best-effort plan is returned with
/// `converged = false`.
pub fn sinkhorn_ot(problem: &TransportProblem) -> Result<TransportPlan> {
    let c = &problem.cost;
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sinkhorn cost matrix".into()));
    }
    let (ta, tb) = c.dim();
    let reg = problem.entropic_reg;
    if reg <= 0.0 {
        return Err(Error::Invalid("entropic_reg must be positive".into()));
    }
    let log_a: Vec<f64> = problem.row_marginal.iter().map(|&v| v.max(1e-300).ln()).collect();
    let log_b: Vec<f64> = problem.col_marginal.iter().map(|&v| v.max(1e-300).ln()).collect();

    // potentials f, g; plan T_ij = exp((f_i + g_j - C_ij)/reg)
    let mut f = vec![0.0f64; ta];
    let mut g = vec![0.0f64; tb];
    let mut iterations_used = 0;
    let mut converged = false;
    for iter in 0..problem.max_iters {
        iterations_used = iter + 1;
        for i in 0..ta {
            let lse = log_sum_exp_iter((0..tb).map(|j| (g[j] - c[[i, j]]) / reg));
            f[i] = reg * (log_a[i] - lse);
        }
        for j in 0..tb {
            let lse = log_sum_exp_iter((0..ta).map(|i| (f[i] - c[[i, j]]) / reg));
            g[j] = reg * (log_b[j] - lse);
        }
        // marginal violation of the current plan
        let mut max_violation = 0.0f64;
        for i in 0..ta {
            let row_sum: f64 = (0..tb).map(|j| ((f[i] + g[j] - c[[i, j]]) / reg).exp()).sum();
            max_violation = max_violation.max((row_sum - problem.row_marginal[i]).abs());
        }
        for j in 0..tb {
            let col_sum: f64 = (0..ta).map(|i| ((f[i] + g[j] - c[[i, j]]) / reg).exp()).sum();
            max_violation = max_violation.max((col_sum - problem.col_marginal[j]).abs());
        }
        if max_violation < problem.tol {
            converged = true;
            break;
        }
    }

    let mut plan = Array2::zeros((ta, tb));
    for i in 0..ta {
        for j in 0..tb {
            plan[[i, j]] = ((f[i] + g[j] - c[[i, j]]) / reg).exp();
        }
    }
    let objective = plan
        .iter()
        .zip(c.iter())
        .map(|(t, cost)| t * cost)
        .sum::<f64>()
        .max(0.0);
    Ok(TransportPlan {
        plan,
        objective,
        iterations_used,
        converged,
    })
}
