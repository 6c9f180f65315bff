//! CTC loss via the forward-backward recursion in log space, with the
//! analytic gradient w.r.t. the per-frame log-probabilities.

use ndarray::{Array2, Array3, ArrayView2, s};

use crate::model::ModelOutput;
use crate::{Error, Result};

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// CTC negative log-likelihood of one label sequence under `log_probs`
/// `[T, K]`, plus the gradient w.r.t. `log_probs`.
///
/// `labels` are character indices; `blank` is the reserved blank class.
pub fn ctc_loss_single(
    log_probs: ArrayView2<'_, f64>,
    labels: &[usize],
    blank: usize,
) -> Result<(f64, Array2<f64>)> {
    let (t_len, n_classes) = log_probs.dim();
    let l = labels.len();
    if l == 0 {
        return Err(Error::Invalid("CTC label sequence is empty".into()));
    }
    if l > t_len {
        return Err(Error::CtcInfeasible {
            index: 0,
            label_len: l,
            out_len: t_len,
        });
    }
    if labels.iter().any(|&c| c >= n_classes || c == blank) {
        return Err(Error::Invalid("CTC label out of class range".into()));
    }

    // extended label: blanks interleaved
    let s_len = 2 * l + 1;
    let ext = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            labels[s / 2]
        }
    };
    let neg_inf = f64::NEG_INFINITY;

    // alpha[t][s]: prefix probability, emission at t included
    let mut alpha = Array2::from_elem((t_len, s_len), neg_inf);
    alpha[[0, 0]] = log_probs[[0, blank]];
    alpha[[0, 1]] = log_probs[[0, labels[0]]];
    for t in 1..t_len {
        for st in 0..s_len {
            let mut terms = vec![alpha[[t - 1, st]]];
            if st >= 1 {
                terms.push(alpha[[t - 1, st - 1]]);
            }
            if st >= 2 && ext(st) != blank && ext(st) != ext(st - 2) {
                terms.push(alpha[[t - 1, st - 2]]);
            }
            let prev = log_sum_exp(&terms);
            alpha[[t, st]] = prev + log_probs[[t, ext(st)]];
        }
    }
    let log_p = log_sum_exp(&[alpha[[t_len - 1, s_len - 1]], alpha[[t_len - 1, s_len - 2]]]);
    if !log_p.is_finite() {
        // happens when repeats make the label unalignable within T frames
        return Err(Error::CtcInfeasible {
            index: 0,
            label_len: l,
            out_len: t_len,
        });
    }

    // beta[t][s]: suffix probability, emission at t included
    let mut beta = Array2::from_elem((t_len, s_len), neg_inf);
    beta[[t_len - 1, s_len - 1]] = log_probs[[t_len - 1, ext(s_len - 1)]];
    beta[[t_len - 1, s_len - 2]] = log_probs[[t_len - 1, ext(s_len - 2)]];
    for t in (0..t_len - 1).rev() {
        for st in 0..s_len {
            let mut terms = vec![beta[[t + 1, st]]];
            if st + 1 < s_len {
                terms.push(beta[[t + 1, st + 1]]);
            }
            if st + 2 < s_len && ext(st + 2) != blank && ext(st + 2) != ext(st) {
                terms.push(beta[[t + 1, st + 2]]);
            }
            let next = log_sum_exp(&terms);
            beta[[t, st]] = next + log_probs[[t, ext(st)]];
        }
    }

    // posterior over extended-label positions; alpha + beta double-counts the
    // emission at t, subtract it once
    let mut grad = Array2::zeros((t_len, n_classes));
    for t in 0..t_len {
        for st in 0..s_len {
            let gamma = alpha[[t, st]] + beta[[t, st]] - log_probs[[t, ext(st)]] - log_p;
            if gamma.is_finite() {
                grad[[t, ext(st)]] -= gamma.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Batch CTC loss: mean over examples of per-example negative log-likelihood.
///
/// Infeasible examples (label longer than the valid output frames) produce a
/// hard error naming the example index; the gradient is zero on padding
/// frames beyond each example's `out_lengths`.
pub fn ctc_loss(
    output: &ModelOutput,
    labels: &Array2<usize>,
    label_lengths: &[usize],
    blank: usize,
) -> Result<(f64, Array3<f64>)> {
    let (b, _, _) = output.log_probs.dim();
    if labels.dim().0 != b || label_lengths.len() != b {
        return Err(Error::Shape {
            context: "ctc_loss labels".into(),
            expected: format!("{b} rows"),
            got: format!("{} / {}", labels.dim().0, label_lengths.len()),
        });
    }
    let mut total = 0.0;
    let mut grad = Array3::zeros(output.log_probs.dim());
    for i in 0..b {
        let out_len = output.out_lengths[i];
        let lab: Vec<usize> = labels.row(i).iter().take(label_lengths[i]).copied().collect();
        if lab.len() > out_len {
            return Err(Error::CtcInfeasible {
                index: i,
                label_len: lab.len(),
                out_len,
            });
        }
        let lp = output.log_probs.slice(s![i, ..out_len, ..]);
        let (nll, g) = ctc_loss_single(lp, &lab, blank).map_err(|e| match e {
            Error::CtcInfeasible {
                label_len, out_len, ..
            } => Error::CtcInfeasible {
                index: i,
                label_len,
                out_len,
            },
            other => other,
        })?;
        total += nll;
        grad.slice_mut(s![i, ..out_len, ..]).assign(&g);
    }
    let scale = 1.0 / b as f64;
    grad.mapv_inplace(|v| v * scale);
    Ok((total * scale, grad))
}
