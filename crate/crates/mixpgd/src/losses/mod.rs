//! Loss functions: CTC, entropic optimal transport with cosine cost, the KL
//! variant, and the combined supervised + unsupervised loss.

pub mod ctc;
pub mod transport;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::model::ModelOutput;
use crate::{Error, Result};

pub use ctc::{ctc_loss, ctc_loss_single};
pub use transport::{cosine_cost, sinkhorn_ot, SinkhornConfig, TransportPlan, TransportProblem};

/// Which unsupervised divergence the mixed loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnsupKind {
    Ot,
    Kl,
}

/// Direction of the KL term; clean-to-adv measures how far the adversarial
/// prediction drifts from the clean reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    #[default]
    CleanToAdv,
    AdvToClean,
}

/// Combined loss value with its components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub ctc: f64,
    pub ot_or_kl: f64,
    pub beta: f64,
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Entropic OT distance between two prediction matrices `[T, K]` under the
/// cosine frame-pair cost, with uniform marginals over frames.
///
/// Returns the objective and its gradient w.r.t. `pred_adv`; the transport
/// plan is held fixed at its converged value, so the gradient flows through
/// the cost matrix only.
pub fn ot_loss(
    pred_clean: &Array2<f64>,
    pred_adv: &Array2<f64>,
    cfg: &SinkhornConfig,
) -> Result<(f64, Array2<f64>, bool)> {
    if pred_clean.dim().1 != pred_adv.dim().1 {
        return Err(Error::Shape {
            context: "ot_loss prediction class dimension".into(),
            expected: format!("{}", pred_clean.dim().1),
            got: format!("{}", pred_adv.dim().1),
        });
    }
    let (ta, tb) = (pred_clean.dim().0, pred_adv.dim().0);
    let cost = cosine_cost(pred_clean, pred_adv)?;
    let problem = TransportProblem::uniform(cost, cfg);
    let plan = sinkhorn_ot(&problem)?;

    // dL/dq_j = sum_i T_ij * dC_ij/dq_j for the cosine cost
    let mut grad = Array2::zeros((tb, pred_adv.dim().1));
    const EPS: f64 = 1e-12;
    for i in 0..ta {
        let p = pred_clean.row(i);
        let pn = p.dot(&p).sqrt();
        for j in 0..tb {
            let t_ij = plan.plan[[i, j]];
            if t_ij == 0.0 {
                continue;
            }
            let q = pred_adv.row(j);
            let qn = q.dot(&q).sqrt();
            let denom = pn * qn + EPS;
            let dot = p.dot(&q);
            // dC/dq = -p/denom + dot * pn * q / (qn * denom^2)
            let coef_q = dot * pn / (qn.max(EPS) * denom * denom);
            for k in 0..q.len() {
                grad[[j, k]] += t_ij * (-p[k] / denom + coef_q * q[k]);
            }
        }
    }
    Ok((plan.objective, grad, plan.converged))
}

/// KL divergence between softmaxed prediction matrices, averaged over frames.
///
/// Returns the value and its gradient w.r.t. `pred_adv`.
pub fn kl_loss(
    pred_clean: &Array2<f64>,
    pred_adv: &Array2<f64>,
    direction: KlDirection,
) -> Result<(f64, Array2<f64>)> {
    if pred_clean.dim() != pred_adv.dim() {
        return Err(Error::Shape {
            context: "kl_loss prediction shape".into(),
            expected: format!("{:?}", pred_clean.dim()),
            got: format!("{:?}", pred_adv.dim()),
        });
    }
    let t = pred_clean.dim().0 as f64;
    let p_clean = softmax_rows(pred_clean);
    let p_adv = softmax_rows(pred_adv);
    let (p, q) = match direction {
        KlDirection::CleanToAdv => (&p_clean, &p_adv),
        KlDirection::AdvToClean => (&p_adv, &p_clean),
    };
    let mut value = 0.0;
    for (prow, qrow) in p.rows().into_iter().zip(q.rows()) {
        for (&pi, &qi) in prow.iter().zip(qrow.iter()) {
            if pi > 0.0 {
                value += pi * (pi.ln() - qi.max(1e-300).ln());
            }
        }
    }
    value /= t;

    // gradient w.r.t. the pred_adv logits (through its softmax)
    let grad = match direction {
        KlDirection::CleanToAdv => (&p_adv - &p_clean) / t,
        KlDirection::AdvToClean => {
            // d/dz_adv sum p_adv (log p_adv - log p_clean), z_adv the logits
            let mut g = Array2::zeros(p_adv.dim());
            for i in 0..p_adv.dim().0 {
                let mut inner = 0.0;
                for k in 0..p_adv.dim().1 {
                    inner += p_adv[[i, k]] * (p_adv[[i, k]].ln() - p_clean[[i, k]].max(1e-300).ln());
                }
                for k in 0..p_adv.dim().1 {
                    let log_ratio = p_adv[[i, k]].ln() - p_clean[[i, k]].max(1e-300).ln();
                    g[[i, k]] = p_adv[[i, k]] * (log_ratio - inner) / t;
                }
            }
            g
        }
    };
    Ok((value.max(0.0), grad))
}

/// Per-example unsupervised loss between clean and adversarial model outputs,
/// averaged over the batch. Returns the scalar, the gradient w.r.t. the
/// adversarial log-probs, and a count of non-converged Sinkhorn solves.
pub fn unsup_loss(
    output_clean: &ModelOutput,
    output_adv: &ModelOutput,
    kind: UnsupKind,
    sinkhorn: &SinkhornConfig,
) -> Result<(f64, Array3<f64>, usize)> {
    let (b, _, _) = output_adv.log_probs.dim();
    let mut total = 0.0;
    let mut grad = Array3::zeros(output_adv.log_probs.dim());
    let mut non_converged = 0;
    for i in 0..b {
        let len = output_adv.out_lengths[i];
        let lp_clean = output_clean
            .log_probs
            .slice(ndarray::s![i, ..len, ..])
            .to_owned();
        let lp_adv = output_adv
            .log_probs
            .slice(ndarray::s![i, ..len, ..])
            .to_owned();
        match kind {
            UnsupKind::Kl => {
                let (v, g) = kl_loss(&lp_clean, &lp_adv, KlDirection::default())?;
                total += v;
                grad.slice_mut(ndarray::s![i, ..len, ..]).assign(&g);
            }
            UnsupKind::Ot => {
                // predictions are per-frame probabilities
                let p_clean = lp_clean.mapv(f64::exp);
                let p_adv = lp_adv.mapv(f64::exp);
                let (v, g_pred, converged) = ot_loss(&p_clean, &p_adv, sinkhorn)?;
                if !converged {
                    non_converged += 1;
                }
                total += v;
                // chain through p = exp(log_p) elementwise
                let g_lp = &g_pred * &p_adv;
                grad.slice_mut(ndarray::s![i, ..len, ..]).assign(&g_lp);
            }
        }
    }
    grad.mapv_inplace(|v| v / b as f64);
    Ok((total / b as f64, grad, non_converged))
}

/// Combined supervised + unsupervised loss: CTC on the adversarial output
/// plus `beta` times the OT or KL divergence from the clean output.
///
/// Returns the loss breakdown and the gradient w.r.t. the adversarial
/// log-probs.
#[allow(clippy::too_many_arguments)]
pub fn mixed_loss(
    output_adv: &ModelOutput,
    output_clean: &ModelOutput,
    labels: &Array2<usize>,
    label_lengths: &[usize],
    blank: usize,
    beta: f64,
    kind: UnsupKind,
    sinkhorn: &SinkhornConfig,
) -> Result<(LossValue, Array3<f64>)> {
    let (ctc_value, ctc_grad) = ctc_loss(output_adv, labels, label_lengths, blank)?;
    if beta == 0.0 {
        return Ok((
            LossValue {
                value: ctc_value,
                ctc: ctc_value,
                ot_or_kl: 0.0,
                beta,
            },
            ctc_grad,
        ));
    }
    let (unsup_value, unsup_grad, _) = unsup_loss(output_clean, output_adv, kind, sinkhorn)?;
    let grad = &ctc_grad + &(unsup_grad * beta);
    Ok((
        LossValue {
            value: ctc_value + beta * unsup_value,
            ctc: ctc_value,
            ot_or_kl: unsup_value,
            beta,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
        softmax_rows(x).mapv(f64::ln)
    }

    #[test]
    fn kl_identical_is_zero() {
        let a = array![[0.2, 0.5, 0.3], [0.1, 0.1, 0.8]];
        let (v, g) = kl_loss(&a, &a, KlDirection::CleanToAdv).unwrap();
        assert!(v.abs() < 1e-12);
        assert!(g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn kl_onehot_vs_uniform_value() {
        // p approx one-hot, q uniform over 4 classes; direct summation check
        let clean = array![[10.0, 0.0, 0.0, 0.0]];
        let adv = array![[0.0, 0.0, 0.0, 0.0]];
        let (v, _) = kl_loss(&clean, &adv, KlDirection::CleanToAdv).unwrap();
        // compute sum p log(p/q) directly
        let p = softmax_rows(&clean);
        let q = 0.25f64;
        let mut expect = 0.0;
        for k in 0..4 {
            expect += p[[0, k]] * (p[[0, k]].ln() - q.ln());
        }
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let a = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-3.0..3.0));
            let b = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-3.0..3.0));
            let (v, _) = kl_loss(&a, &b, KlDirection::CleanToAdv).unwrap();
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let clean = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let mut adv = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        for dir in [KlDirection::CleanToAdv, KlDirection::AdvToClean] {
            let (_, g) = kl_loss(&clean, &adv, dir).unwrap();
            let h = 1e-6;
            for i in 0..3 {
                for k in 0..4 {
                    let orig = adv[[i, k]];
                    adv[[i, k]] = orig + h;
                    let (vp, _) = kl_loss(&clean, &adv, dir).unwrap();
                    adv[[i, k]] = orig - h;
                    let (vm, _) = kl_loss(&clean, &adv, dir).unwrap();
                    adv[[i, k]] = orig;
                    let fd = (vp - vm) / (2.0 * h);
                    assert!(
                        (fd - g[[i, k]]).abs() <= 1e-6 + 1e-3 * fd.abs(),
                        "dir {dir:?} [{i},{k}]: fd {fd} vs g {}",
                        g[[i, k]]
                    );
                }
            }
        }
    }

    #[test]
    fn ot_loss_vanishes_on_identical_as_reg_shrinks() {
        // entropic smoothing keeps the objective positive at moderate reg;
        // it approaches the unregularized optimum (zero here) as reg -> 0
        let p = array![[0.5, 0.5], [0.9, 0.1], [0.2, 0.8]];
        let small = SinkhornConfig {
            reg: 0.002,
            max_iters: 50_000,
            tol: 1e-10,
        };
        let (v, _, _) = ot_loss(&p, &p, &small).unwrap();
        assert!(v.abs() < 1e-3, "v = {v}");
        let (v_default, _, _) = ot_loss(&p, &p, &SinkhornConfig::default()).unwrap();
        assert!(v_default >= v);
    }

    #[test]
    fn ot_loss_symmetric_square() {
        // symmetry is exact at the fixed point, so use a config that converges
        let cfg = SinkhornConfig {
            reg: 0.5,
            max_iters: 10_000,
            tol: 1e-12,
        };
        let a = array![[0.5, 0.5], [0.9, 0.1], [0.2, 0.8]];
        let b = array![[0.3, 0.7], [0.6, 0.4], [0.1, 0.9]];
        let (v1, _, _) = ot_loss(&a, &b, &cfg).unwrap();
        let (v2, _, _) = ot_loss(&b, &a, &cfg).unwrap();
        assert!((v1 - v2).abs() < 1e-8, "{v1} vs {v2}");
    }

    #[test]
    fn ot_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        // the analytic gradient holds the plan fixed (envelope form); the
        // plan-sensitivity term it drops vanishes as reg -> 0, so check at
        // small reg where the finite difference sees the same function
        let cfg = SinkhornConfig {
            reg: 0.0005,
            max_iters: 50_000,
            tol: 1e-12,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let clean = Array2::from_shape_fn((3, 4), |_| rng.gen_range(0.1..1.0));
        let mut adv = Array2::from_shape_fn((3, 4), |_| rng.gen_range(0.1..1.0));
        let (_, g, _) = ot_loss(&clean, &adv, &cfg).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        let mut ok = 0;
        for i in 0..3 {
            for k in 0..4 {
                let orig = adv[[i, k]];
                adv[[i, k]] = orig + h;
                let (vp, _, _) = ot_loss(&clean, &adv, &cfg).unwrap();
                adv[[i, k]] = orig - h;
                let (vm, _, _) = ot_loss(&clean, &adv, &cfg).unwrap();
                adv[[i, k]] = orig;
                let fd = (vp - vm) / (2.0 * h);
                checked += 1;
                // plan held fixed in the analytic grad; re-solving perturbs it
                // slightly, hence the modest tolerance
                if (fd - g[[i, k]]).abs() <= 1e-5 + 1e-3 * fd.abs() {
                    ok += 1;
                }
            }
        }
        assert!(ok * 100 >= checked * 95, "only {ok}/{checked} coords match");
    }

    #[test]
    fn mixed_loss_affine_in_beta() {
        use crate::model::ModelOutput;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let raw_adv = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        let raw_clean = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        let lp_adv = log_softmax_rows(&raw_adv);
        let lp_clean = log_softmax_rows(&raw_clean);
        let mk = |lp: &Array2<f64>| ModelOutput {
            log_probs: lp.clone().insert_axis(ndarray::Axis(0)),
            out_lengths: vec![5],
        };
        let labels = ndarray::array![[1usize, 2]];
        let lens = vec![2usize];
        let cfg = SinkhornConfig::default();
        let val = |beta: f64| {
            let (lv, _) = mixed_loss(
                &mk(&lp_adv),
                &mk(&lp_clean),
                &labels,
                &lens,
                3,
                beta,
                UnsupKind::Ot,
                &cfg,
            )
            .unwrap();
            lv
        };
        let l0 = val(0.0);
        let l1 = val(1.0);
        let l2 = val(2.0);
        // beta = 0 equals the CTC component exactly
        assert_eq!(l0.value, l0.ctc);
        // value(beta) affine in beta
        assert!((l2.value - 2.0 * l1.value + l0.value).abs() < 1e-9);
        // LossValue invariant
        assert!((l1.value - (l1.ctc + l1.beta * l1.ot_or_kl)).abs() < 1e-6);
    }

    #[test]
    fn mixed_loss_zero_unsup_when_equal() {
        use crate::model::ModelOutput;
        let lp = log_softmax_rows(&array![[0.3, 0.2, 0.1, 0.4], [1.0, 0.0, 0.0, 0.0]]);
        let mk = || ModelOutput {
            log_probs: lp.clone().insert_axis(ndarray::Axis(0)),
            out_lengths: vec![2],
        };
        let labels = ndarray::array![[0usize]];
        let (lv, _) = mixed_loss(
            &mk(),
            &mk(),
            &labels,
            &[1],
            3,
            1.0,
            UnsupKind::Ot,
            &SinkhornConfig {
                reg: 0.002,
                max_iters: 50_000,
                tol: 1e-10,
            },
        )
        .unwrap();
        assert!((lv.value - lv.ctc).abs() < 1e-3, "unsup part {}", lv.ot_or_kl);
    }
}
