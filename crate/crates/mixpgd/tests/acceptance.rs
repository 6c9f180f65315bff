//! Release gate: every shipped guarantee checked in one place, one pass/fail
//! line per criterion. The ordering criteria (6-9) train real models on the
//! desk-scale corpus and dominate the runtime (tens of minutes).

mod common;

use std::time::{Duration, Instant};

use common::*;
use mixpgd::alphabet::Alphabet;
use mixpgd::attacks::{
    fgsm, generate, mifgsm, mixpgd, mixpgd_init, pgd_from_init, AttackConfig, AttackFamily,
};
use mixpgd::data::{make_batch, AudioExample};
use mixpgd::eval::{eval_attacked, evaluate_whitebox};
use mixpgd::losses::{
    ctc_loss, kl_loss, mixed_loss, ot_loss, sinkhorn_ot, KlDirection, SinkhornConfig,
    TransportProblem, UnsupKind,
};
use mixpgd::model::{AsrModel, ModelOutput};
use mixpgd::train::{train, Regime, TrainConfig};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeds frozen for the ordering criteria (6-9). Every run is deterministic,
/// so the measured orderings are a fixed function of these constants.
const ORDERING_SEEDS: [u64; 10] = [100, 101, 102, 103, 104, 105, 106, 107, 108, 109];

struct Gate {
    results: Vec<(usize, bool, String, Duration)>,
}

impl Gate {
    fn record(&mut self, n: usize, pass: bool, detail: String, elapsed: Duration) {
        self.results.push((n, pass, detail, elapsed));
    }
}

fn log_softmax_rows(rng: &mut ChaCha8Rng, t: usize, k: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((t, k), |_| rng.gen_range(-2.0..2.0));
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    m
}

// --- criterion 1: CTC vs brute-force alignment enumeration ----------------

fn criterion_1(gate: &mut Gate) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    let mut worst = 0.0f64;
    while checked < 200 {
        let k = rng.gen_range(2..=4usize);
        let t = rng.gen_range(1..=6usize);
        let l = rng.gen_range(1..=3usize).min(t);
        let labels: Vec<usize> = (0..l).map(|_| rng.gen_range(0..k - 1)).collect();
        let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
        if l + repeats > t {
            continue;
        }
        let lp = log_softmax_rows(&mut rng, t, k);
        let oracle = ctc_nll_bruteforce(lp.view(), &labels, k - 1);
        let out = ModelOutput {
            log_probs: lp.insert_axis(ndarray::Axis(0)),
            out_lengths: vec![t],
        };
        let mut lab = Array2::zeros((1, l));
        for (j, &v) in labels.iter().enumerate() {
            lab[[0, j]] = v;
        }
        let (got, _) = ctc_loss(&out, &lab, &[l], k - 1).unwrap();
        worst = worst.max(rel_err(got, oracle));
        checked += 1;
    }
    let elapsed = t0.elapsed();
    let pass = worst < 1e-5 && elapsed < Duration::from_secs(60);
    gate.record(
        1,
        pass,
        format!("CTC matches brute-force enumeration on 200 draws, worst rel err {worst:.2e}"),
        elapsed,
    );
}

// --- criterion 2: Sinkhorn vs exact transport oracle ----------------------

fn criterion_2(gate: &mut Gate) {
    let t0 = Instant::now();
    let cfg = SinkhornConfig {
        reg: 0.01,
        max_iters: 20_000,
        tol: 1e-9,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut pass = true;
    let mut worst_gap = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(2..=4usize);
        let cost = Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..2.0));
        let exact = exact_ot_uniform(&cost);
        let plan = sinkhorn_ot(&TransportProblem::uniform(cost, &cfg)).unwrap();
        // tiny slack: a best-effort plan's marginals can be short by ~tol,
        // putting its objective marginally below the LP optimum
        if plan.objective < exact - 1e-5 {
            pass = false;
        }
        let gap = plan.objective - exact;
        worst_gap = worst_gap.max(gap);
        if gap >= 0.05 {
            pass = false;
        }
        if plan.converged {
            let marg = 1.0 / n as f64;
            for i in 0..n {
                if (plan.plan.row(i).sum() - marg).abs() > 1e-6
                    || (plan.plan.column(i).sum() - marg).abs() > 1e-6
                {
                    pass = false;
                }
            }
        }
    }
    let elapsed = t0.elapsed();
    pass = pass && elapsed < Duration::from_secs(60);
    gate.record(
        2,
        pass,
        format!("entropic OT dominates exact OT on 50 costs, worst gap {worst_gap:.4} < 0.05"),
        elapsed,
    );
}

// --- criterion 3: analytic gradients vs central finite differences --------

/// Fraction of coordinates where the analytic gradient matches a central
/// finite difference of `f` to 1e-3 relative.
fn fd_agreement<F: FnMut(&Array2<f64>) -> f64>(
    x: &Array2<f64>,
    grad: &Array2<f64>,
    mut f: F,
) -> f64 {
    const H: f64 = 1e-6;
    let mut ok = 0usize;
    let mut total = 0usize;
    for idx in 0..x.len() {
        let (r, c) = (idx / x.dim().1, idx % x.dim().1);
        let mut xp = x.clone();
        xp[[r, c]] += H;
        let mut xm = x.clone();
        xm[[r, c]] -= H;
        let fd = (f(&xp) - f(&xm)) / (2.0 * H);
        total += 1;
        if rel_err(grad[[r, c]], fd) <= 1e-3 {
            ok += 1;
        }
    }
    ok as f64 / total as f64
}

fn criterion_3(gate: &mut Gate) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut fractions = Vec::new();

    // ctc_loss, gradient w.r.t. the log-probs as free variables
    let lp = log_softmax_rows(&mut rng, 5, 4);
    let labels: Vec<usize> = vec![0, 1];
    let mut lab = Array2::zeros((1, 2));
    lab[[0, 0]] = labels[0];
    lab[[0, 1]] = labels[1];
    let ctc_of = |m: &Array2<f64>| {
        let out = ModelOutput {
            log_probs: m.clone().insert_axis(ndarray::Axis(0)),
            out_lengths: vec![5],
        };
        ctc_loss(&out, &lab, &[2], 3).unwrap().0
    };
    let out = ModelOutput {
        log_probs: lp.clone().insert_axis(ndarray::Axis(0)),
        out_lengths: vec![5],
    };
    let (_, g) = ctc_loss(&out, &lab, &[2], 3).unwrap();
    let g2 = g.index_axis(ndarray::Axis(0), 0).to_owned();
    fractions.push(("ctc", fd_agreement(&lp, &g2, ctc_of)));

    // ot_loss: the plan-fixed (envelope) gradient is exact only in the
    // reg -> 0 limit, so the check runs at small regularization
    let sk = SinkhornConfig {
        reg: 5e-4,
        max_iters: 50_000,
        tol: 1e-12,
    };
    let p_clean = log_softmax_rows(&mut rng, 3, 4).mapv(f64::exp);
    let p_adv = log_softmax_rows(&mut rng, 3, 4).mapv(f64::exp);
    let (_, g_ot, _) = ot_loss(&p_clean, &p_adv, &sk).unwrap();
    fractions.push((
        "ot",
        fd_agreement(&p_adv, &g_ot, |m| ot_loss(&p_clean, m, &sk).unwrap().0),
    ));

    // kl_loss w.r.t. the adversarial logits
    let z_clean = log_softmax_rows(&mut rng, 4, 5);
    let z_adv = log_softmax_rows(&mut rng, 4, 5);
    let (_, g_kl) = kl_loss(&z_clean, &z_adv, KlDirection::CleanToAdv).unwrap();
    fractions.push((
        "kl",
        fd_agreement(&z_adv, &g_kl, |m| {
            kl_loss(&z_clean, m, KlDirection::CleanToAdv).unwrap().0
        }),
    ));

    // mixed_loss (CTC + beta * OT) w.r.t. the adversarial log-probs
    let lp_clean = log_softmax_rows(&mut rng, 4, 4);
    let lp_adv = log_softmax_rows(&mut rng, 4, 4);
    let clean_out = ModelOutput {
        log_probs: lp_clean.clone().insert_axis(ndarray::Axis(0)),
        out_lengths: vec![4],
    };
    let mut mlab = Array2::zeros((1, 1));
    mlab[[0, 0]] = 0usize;
    let mixed_of = |m: &Array2<f64>| {
        let out = ModelOutput {
            log_probs: m.clone().insert_axis(ndarray::Axis(0)),
            out_lengths: vec![4],
        };
        mixed_loss(&out, &clean_out, &mlab, &[1], 3, 0.5, UnsupKind::Ot, &sk)
            .unwrap()
            .0
            .value
    };
    let adv_out = ModelOutput {
        log_probs: lp_adv.clone().insert_axis(ndarray::Axis(0)),
        out_lengths: vec![4],
    };
    let (_, g_mix) = mixed_loss(&adv_out, &clean_out, &mlab, &[1], 3, 0.5, UnsupKind::Ot, &sk)
        .unwrap();
    let g_mix2 = g_mix.index_axis(ndarray::Axis(0), 0).to_owned();
    fractions.push(("mixed", fd_agreement(&lp_adv, &g_mix2, mixed_of)));

    let elapsed = t0.elapsed();
    let pass = fractions.iter().all(|(_, f)| *f >= 0.95) && elapsed < Duration::from_secs(300);
    let detail = fractions
        .iter()
        .map(|(n, f)| format!("{n} {:.0}%", f * 100.0))
        .collect::<Vec<_>>()
        .join(", ");
    gate.record(
        3,
        pass,
        format!("gradients match central finite differences ({detail} of coords within 1e-3)"),
        elapsed,
    );
}

// --- criterion 4: perturbation invariants ---------------------------------

fn criterion_4(gate: &mut Gate, examples: &[AudioExample]) {
    let t0 = Instant::now();
    let alphabet = Alphabet::default();
    let model = AsrModel::new(&tiny_model_cfg(), 4);
    let batch = make_batch(examples, &alphabet).unwrap();
    let sk = SinkhornConfig {
        max_iters: 30,
        ..SinkhornConfig::default()
    };
    let hash_before = model.param_hash();
    let families = [
        AttackFamily::Fgsm,
        AttackFamily::Mifgsm,
        AttackFamily::Pgd,
        AttackFamily::FeatureScattering,
        AttackFamily::Mixpgd,
    ];
    let mut pass = true;
    let mut n_checked = 0;
    for &fam in &families {
        for seed in [0u64, 4242] {
            let mut cfg = AttackConfig::new(fam, TINY_EPS).with_seed(seed);
            if fam != AttackFamily::Fgsm {
                cfg.n_steps = 3;
            }
            let p = generate(&model, &batch, &cfg, &sk).unwrap();
            n_checked += 1;
            if p.linf() > TINY_EPS + 1e-12 {
                pass = false;
            }
            for (i, &len) in batch.feature_lengths.iter().enumerate() {
                let padded = p.delta.slice(ndarray::s![i, .., len..]);
                if padded.iter().any(|&v| v != 0.0) {
                    pass = false;
                }
            }
            if model.param_hash() != hash_before {
                pass = false;
            }
        }
    }
    let elapsed = t0.elapsed();
    gate.record(
        4,
        pass,
        format!(
            "{n_checked}/{n_checked} perturbations respect the L-inf budget, zero padding, \
             untouched parameters"
        ),
        elapsed,
    );
}

// --- criterion 5: reduction lattice ---------------------------------------

fn criterion_5(gate: &mut Gate, examples: &[AudioExample]) {
    let t0 = Instant::now();
    let alphabet = Alphabet::default();
    let model = AsrModel::new(&tiny_model_cfg(), 5);
    let batch = make_batch(examples, &alphabet).unwrap();
    let mut pass = true;

    // MI-FGSM with zero momentum and a single full-size step is FGSM
    let mut mi_cfg = AttackConfig::new(AttackFamily::Mifgsm, TINY_EPS);
    mi_cfg.n_steps = 1;
    mi_cfg.step_size = TINY_EPS;
    mi_cfg.momentum_decay = 0.0;
    let fg_cfg = AttackConfig::new(AttackFamily::Fgsm, TINY_EPS);
    let d_mi = mifgsm(&model, &batch, &mi_cfg).unwrap().delta;
    let d_fg = fgsm(&model, &batch, &fg_cfg).unwrap().delta;
    if d_mi != d_fg {
        pass = false;
    }

    // mixPGD with beta = 0 is PGD from the same (Gaussian) initialization
    let sk = SinkhornConfig::default();
    let mut mx_cfg = AttackConfig::new(AttackFamily::Mixpgd, TINY_EPS).with_seed(7);
    mx_cfg.beta = 0.0;
    let mut pg_cfg = AttackConfig::new(AttackFamily::Pgd, TINY_EPS).with_seed(7);
    pg_cfg.n_steps = mx_cfg.n_steps;
    pg_cfg.step_size = mx_cfg.step_size;
    let d_mx = mixpgd(&model, &batch, &mx_cfg, &sk).unwrap().delta;
    let d_pg = pgd_from_init(&model, &batch, &pg_cfg, mixpgd_init(&batch, 7))
        .unwrap()
        .delta;
    if d_mx != d_pg {
        pass = false;
    }

    // mixed_loss with beta = 0 is exactly the CTC loss
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let lp = log_softmax_rows(&mut rng, 5, 4);
    let out = ModelOutput {
        log_probs: lp.insert_axis(ndarray::Axis(0)),
        out_lengths: vec![5],
    };
    let clean = ModelOutput {
        log_probs: out.log_probs.clone(),
        out_lengths: vec![5],
    };
    let mut lab = Array2::zeros((1, 2));
    lab[[0, 1]] = 1usize;
    let (mv, mg) = mixed_loss(&out, &clean, &lab, &[2], 3, 0.0, UnsupKind::Ot, &sk).unwrap();
    let (cv, cg) = ctc_loss(&out, &lab, &[2], 3).unwrap();
    if mv.value != cv || mg != cg {
        pass = false;
    }

    gate.record(
        5,
        pass,
        "mifgsm(no momentum, 1 step) == fgsm; mixpgd(beta=0) == pgd from same init; \
         mixed_loss(beta=0) == ctc"
            .to_string(),
        t0.elapsed(),
    );
}

// --- criteria 6-9: attack strength, defense, OT vs KL, transfer -----------

fn train_variant(
    regime: Regime,
    kind: UnsupKind,
    seed: u64,
    examples: &[AudioExample],
    sk: &SinkhornConfig,
) -> AsrModel {
    let mut cfg = tiny_train_cfg(regime, seed);
    cfg.unsup_kind = kind;
    let mut model = AsrModel::new(&tiny_model_cfg(), seed);
    train(&mut model, examples, &Alphabet::default(), &cfg, sk, None, "").unwrap();
    model
}

fn ordering_criteria(gate: &mut Gate) {
    let alphabet = Alphabet::default();
    let sk_eval = SinkhornConfig::default();
    // fewer Sinkhorn iterations during inner maximization keep the OT-variant
    // training affordable without changing the measured orderings
    let sk_train = SinkhornConfig {
        max_iters: 30,
        ..SinkhornConfig::default()
    };
    let n = ORDERING_SEEDS.len() as u32;
    let (mut c6, mut c7, mut c8, mut c9) = (0u32, 0u32, 0u32, 0u32);
    let mut t_attack = Duration::ZERO;
    let t_all = Instant::now();
    for &seed in &ORDERING_SEEDS {
        let examples = tiny_corpus(seed);
        let atk = |fam: AttackFamily, steps: usize| {
            let mut c = AttackConfig::new(fam, TINY_EPS).with_seed(seed);
            if fam != AttackFamily::Fgsm {
                c.n_steps = steps;
            }
            c
        };
        let wer = |m: &AsrModel, g: &AsrModel, a: Option<&AttackConfig>| {
            eval_attacked(m, g, &examples, &alphabet, a, &sk_eval, 5)
                .unwrap()
                .wer
        };

        // criterion 6: attack strength ordering on the standard model
        let t6 = Instant::now();
        let std_m = train_tiny(Regime::Standard, seed, &examples, None);
        let clean = wer(&std_m, &std_m, None);
        let w_fgsm = wer(&std_m, &std_m, Some(&atk(AttackFamily::Fgsm, 1)));
        let w_p20 = wer(&std_m, &std_m, Some(&atk(AttackFamily::Pgd, 20)));
        let w_p100 = wer(&std_m, &std_m, Some(&atk(AttackFamily::Pgd, 100)));
        t_attack += t6.elapsed();
        c6 += (clean <= w_fgsm && w_fgsm <= w_p20 && w_p20 <= w_p100) as u32;

        // criterion 7: defense ordering under PGD-20
        let pgd_m = train_variant(Regime::PgdAdv, UnsupKind::Ot, seed, &examples, &sk_train);
        let mix_m = train_variant(Regime::Mixpgd, UnsupKind::Ot, seed, &examples, &sk_train);
        let d_pgd = wer(&pgd_m, &pgd_m, Some(&atk(AttackFamily::Pgd, 20)));
        let d_mix = wer(&mix_m, &mix_m, Some(&atk(AttackFamily::Pgd, 20)));
        c7 += (d_mix <= d_pgd && d_pgd <= w_p20) as u32;

        // criterion 8: OT variant no worse than KL variant
        let kl_m = train_variant(Regime::Mixpgd, UnsupKind::Kl, seed, &examples, &sk_train);
        let f_ot = wer(&mix_m, &mix_m, Some(&atk(AttackFamily::Fgsm, 1)));
        let f_kl = wer(&kl_m, &kl_m, Some(&atk(AttackFamily::Fgsm, 1)));
        let p_kl = wer(&kl_m, &kl_m, Some(&atk(AttackFamily::Pgd, 20)));
        c8 += (f_ot <= f_kl && d_mix <= p_kl) as u32;

        // criterion 9: transferred attacks no stronger than white-box
        let surrogate = train_tiny(Regime::Standard, seed + 500, &examples, None);
        let w_transfer = wer(&std_m, &surrogate, Some(&atk(AttackFamily::Pgd, 20)));
        c9 += (w_transfer <= w_p20) as u32;
    }
    let total = t_all.elapsed();
    gate.record(
        6,
        c6 >= 9 && t_attack < Duration::from_secs(1800),
        format!("clean <= FGSM <= PGD20 <= PGD100 WER in {c6}/{n} seeded runs (need 9)"),
        t_attack,
    );
    gate.record(
        7,
        c7 >= 7 && total < Duration::from_secs(7200),
        format!("mixPGD <= PGD-adv <= standard WER under PGD20 in {c7}/{n} seeds (need 7)"),
        total,
    );
    gate.record(
        8,
        c8 >= 7,
        format!("OT variant <= KL variant WER under FGSM and PGD20 in {c8}/{n} seeds (need 7)"),
        total,
    );
    gate.record(
        9,
        c9 * 10 >= n * 7,
        format!("transferred PGD <= white-box PGD WER in {c9}/{n} configurations (need 70%)"),
        total,
    );
}

// --- criterion 10: end-to-end determinism ---------------------------------

fn criterion_10(gate: &mut Gate, examples: &[AudioExample]) {
    let t0 = Instant::now();
    let alphabet = Alphabet::default();
    let cfg = TrainConfig {
        epochs: 30,
        ..tiny_train_cfg(Regime::Standard, 9_001)
    };
    let sk = SinkhornConfig::default();
    let attacks = [
        AttackConfig::new(AttackFamily::Fgsm, TINY_EPS).with_seed(1),
        AttackConfig::new(AttackFamily::Pgd, TINY_EPS).with_steps(5).with_seed(1),
    ];
    let run = || {
        let mut model = AsrModel::new(&tiny_model_cfg(), cfg.seed);
        train(&mut model, examples, &alphabet, &cfg, &sk, None, "").unwrap();
        let report =
            evaluate_whitebox(&model, "m", "standard", examples, &alphabet, &attacks, &sk, 5)
                .unwrap();
        (model.param_hash(), serde_json::to_string(&report).unwrap())
    };
    let (hash_a, report_a) = run();
    let (hash_b, report_b) = run();
    let pass = hash_a == hash_b && report_a == report_b;
    gate.record(
        10,
        pass,
        "identical config and seed give identical parameter hash and EvalReport across two runs"
            .to_string(),
        t0.elapsed(),
    );
}

#[test]
fn acceptance() {
    let mut gate = Gate { results: Vec::new() };
    let shared_examples = tiny_corpus(1);

    criterion_1(&mut gate);
    criterion_2(&mut gate);
    criterion_3(&mut gate);
    criterion_4(&mut gate, &shared_examples);
    criterion_5(&mut gate, &shared_examples);
    criterion_10(&mut gate, &shared_examples);
    ordering_criteria(&mut gate);

    gate.results.sort_by_key(|r| r.0);
    let mut all_pass = true;
    for (n, pass, detail, elapsed) in &gate.results {
        let status = if *pass { "PASS" } else { "FAIL" };
        println!("ACCEPTANCE {n}: {status} — {detail} [{:.1}s]", elapsed.as_secs_f64());
        all_pass &= pass;
    }
    assert!(all_pass, "one or more acceptance criteria failed");
}
