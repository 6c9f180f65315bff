//! Shared fixtures for the integration and acceptance suites: independent
//! oracles (brute-force CTC, permutation OT) and tiny training setups.
#![allow(dead_code)]

use mixpgd::alphabet::Alphabet;
use mixpgd::audio::MelConfig;
use mixpgd::data::{synth_toy_corpus, AudioExample};
use mixpgd::losses::SinkhornConfig;
use mixpgd::model::{AsrModel, ModelConfig};
use mixpgd::train::{train, Regime, TrainConfig};
use ndarray::{Array2, ArrayView2};

/// Collapse a frame-level path: merge repeats, then drop blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &p in path {
        if p != prev && p != blank {
            out.push(p);
        }
        prev = p;
    }
    out
}

/// Brute-force CTC negative log-likelihood: enumerate all K^T frame paths
/// and log-sum-exp those whose collapse equals the label sequence.
/// Returns negative infinity mass (f64::INFINITY NLL) when no path matches.
pub fn ctc_nll_bruteforce(log_probs: ArrayView2<'_, f64>, labels: &[usize], blank: usize) -> f64 {
    let (t, k) = log_probs.dim();
    let n_paths = k.pow(t as u32);
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0usize; t];
    for idx in 0..n_paths {
        let mut rem = idx;
        for slot in path.iter_mut() {
            *slot = rem % k;
            rem /= k;
        }
        if collapse_path(&path, blank) == labels {
            let lp: f64 = path.iter().enumerate().map(|(ti, &ki)| log_probs[[ti, ki]]).sum();
            total = if total == f64::NEG_INFINITY {
                lp
            } else {
                let m = total.max(lp);
                m + ((total - m).exp() + (lp - m).exp()).ln()
            };
        }
    }
    -total
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(pool: &mut Vec<usize>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if pool.is_empty() {
            out.push(cur.clone());
            return;
        }
        for i in 0..pool.len() {
            let v = pool.remove(i);
            cur.push(v);
            rec(pool, cur, out);
            cur.pop();
            pool.insert(i, v);
        }
    }
    let mut out = Vec::new();
    rec(&mut (0..n).collect(), &mut Vec::new(), &mut out);
    out
}

/// Exact unregularized OT objective for a square cost matrix with uniform
/// marginals. By Birkhoff's theorem the optimum is a permutation scaled by
/// 1/n, so exhaustive permutation search is an exact LP oracle for n ≤ 8.
pub fn exact_ot_uniform(cost: &Array2<f64>) -> f64 {
    let (n, m) = cost.dim();
    assert_eq!(n, m, "oracle requires a square cost matrix");
    permutations(n)
        .iter()
        .map(|perm| perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>() / n as f64)
        .fold(f64::INFINITY, f64::min)
}

/// Relative mismatch |a − b| / max(1, |b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

// --- tiny desk-scale training fixtures -----------------------------------

pub const TINY_MEL_BINS: usize = 16;
/// L∞ budget used for acceptance attacks/training. The published budget of
/// 0.00004 is invisible at toy scale; this is large enough to move WER.
pub const TINY_EPS: f64 = 0.05;
pub const TINY_EPOCHS: usize = 240;
pub const TINY_N_EXAMPLES: usize = 10;

pub fn tiny_model_cfg() -> ModelConfig {
    ModelConfig {
        n_rescnn_blocks: 1,
        n_birnn_layers: 1,
        rnn_hidden: 16,
        conv_channels: 8,
        fc_hidden: 16,
        mel_bins: TINY_MEL_BINS,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn tiny_corpus(seed: u64) -> Vec<AudioExample> {
    let mel = MelConfig {
        mel_bins: TINY_MEL_BINS,
        ..MelConfig::default()
    };
    let mut examples = synth_toy_corpus(seed, TINY_N_EXAMPLES);
    for e in &mut examples {
        e.featurize(&mel).unwrap();
    }
    examples
}

pub fn tiny_train_cfg(regime: Regime, seed: u64) -> TrainConfig {
    TrainConfig {
        regime,
        epochs: TINY_EPOCHS,
        inner_steps: 4,
        epsilon: TINY_EPS,
        lr_peak: 0.004,
        batch_size: 5,
        seed,
        ..TrainConfig::default()
    }
}

/// Train a tiny model of the given regime; fully deterministic in `seed`.
pub fn train_tiny(regime: Regime, seed: u64, examples: &[AudioExample], cfg: Option<TrainConfig>) -> AsrModel {
    let alphabet = Alphabet::default();
    let tcfg = cfg.unwrap_or_else(|| tiny_train_cfg(regime, seed));
    let mut model = AsrModel::new(&tiny_model_cfg(), seed);
    train(
        &mut model,
        examples,
        &alphabet,
        &tcfg,
        &SinkhornConfig::default(),
        None,
        "",
    )
    .expect("tiny training run");
    model
}
