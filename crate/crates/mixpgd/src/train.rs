//! Outer-minimization training loop: AdamW with one-cycle learning rate,
//! gradient clipping, and an inner maximization chosen by training regime.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alphabet::Alphabet;
use crate::attacks::{generate, AttackConfig, AttackFamily, Perturbation};
use crate::data::{make_batch, AudioExample, FeatureBatch};
use crate::losses::{ctc_loss, SinkhornConfig, UnsupKind};
use crate::model::checkpoint::{save_checkpoint, Checkpoint, NamedBlob, TrainingMeta};
use crate::model::{AsrModel, Mode};
use crate::{Error, Result};

/// Training regime: which inner maximization (if any) produces the samples
/// the model is updated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Standard,
    FgsmAdv,
    PgdAdv,
    FeatureScattering,
    Mixpgd,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regime::Standard => "standard",
            Regime::FgsmAdv => "fgsm_adv",
            Regime::PgdAdv => "pgd_adv",
            Regime::FeatureScattering => "feature_scattering",
            Regime::Mixpgd => "mixpgd",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    /// Inner maximization steps T_i.
    pub inner_steps: usize,
    /// L∞ budget used by the inner maximization.
    pub epsilon: f64,
    /// Inner step size η₁; defaults to ε/4 when unset.
    pub step_size: Option<f64>,
    /// Peak learning rate η₂ of the one-cycle schedule.
    pub lr_peak: f64,
    pub batch_size: usize,
    /// Weight β of the unsupervised term in the mixpgd inner loss.
    pub beta: f64,
    pub unsup_kind: UnsupKind,
    pub seed: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Also accumulate gradients on the clean batch, averaging with the
    /// adversarial gradients.
    pub mix_clean: bool,
    /// Fraction of steps spent ramping up to the peak learning rate.
    pub pct_start: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Standard,
            epochs: 5,
            inner_steps: 4,
            epsilon: 0.00004,
            step_size: None,
            lr_peak: 0.0005,
            batch_size: 10,
            beta: 1.0,
            unsup_kind: UnsupKind::Ot,
            seed: 0,
            weight_decay: 1e-4,
            grad_clip: 5.0,
            mix_clean: false,
            pct_start: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr_peak <= 0.0 {
            return Err(Error::Config("lr_peak must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.pct_start) {
            return Err(Error::Config("pct_start must be in [0, 1)".into()));
        }
        if self.regime != Regime::Standard && self.epsilon < 0.0 {
            return Err(Error::Config("epsilon must be non-negative".into()));
        }
        Ok(())
    }

    pub fn inner_step_size(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }

    /// Attack configuration for this regime's inner maximization, or None
    /// for standard training.
    pub fn inner_attack(&self, seed: u64) -> Option<AttackConfig> {
        let family = match self.regime {
            Regime::Standard => return None,
            Regime::FgsmAdv => AttackFamily::Fgsm,
            Regime::PgdAdv => AttackFamily::Pgd,
            Regime::FeatureScattering => AttackFamily::FeatureScattering,
            Regime::Mixpgd => AttackFamily::Mixpgd,
        };
        let mut cfg = AttackConfig::new(family, self.epsilon);
        if family != AttackFamily::Fgsm {
            cfg.n_steps = self.inner_steps;
            cfg.step_size = self.inner_step_size();
        }
        cfg.beta = self.beta;
        cfg.unsup_kind = self.unsup_kind;
        cfg.seed = seed;
        Some(cfg)
    }
}

/// One-cycle schedule: linear ramp from `peak / div` to `peak`, then cosine
/// anneal down to `peak / final_div`. The peak is attained exactly at the end
/// of the ramp.
#[derive(Debug, Clone)]
pub struct OneCycle {
    pub total_steps: usize,
    pub peak: f64,
    pub pct_start: f64,
    pub div: f64,
    pub final_div: f64,
}

impl OneCycle {
    pub fn new(total_steps: usize, peak: f64, pct_start: f64) -> Self {
        OneCycle {
            total_steps: total_steps.max(1),
            peak,
            pct_start,
            div: 25.0,
            final_div: 1e4,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let warmup = ((self.total_steps as f64) * self.pct_start).round() as usize;
        let start = self.peak / self.div;
        let floor = self.peak / self.final_div;
        if step <= warmup {
            if warmup == 0 {
                return self.peak;
            }
            let frac = step as f64 / warmup as f64;
            start + (self.peak - start) * frac
        } else {
            let span = (self.total_steps - warmup).max(1);
            let frac = (step - warmup) as f64 / span as f64;
            let frac = frac.min(1.0);
            floor + (self.peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }

    /// The maximum learning rate over the whole schedule.
    pub fn max_lr(&self) -> f64 {
        (0..=self.total_steps).map(|s| self.lr(s)).fold(f64::MIN, f64::max)
    }
}

/// AdamW with decoupled weight decay. State is keyed by parameter name.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: HashMap<String, Vec<f64>>,
    pub v: HashMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update. `grads` must be a `zeros_like` mirror of `model`
    /// filled by the backward pass.
    pub fn step(&mut self, model: &mut AsrModel, grads: &AsrModel, lr: f64) {
        self.t += 1;
        let mut flat: Vec<(String, Vec<f64>)> = Vec::new();
        grads.for_each_param(&mut |name, _, data| flat.push((name.to_string(), data.to_vec())));
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut idx = 0;
        model.for_each_param_mut(&mut |name, params| {
            let (gname, g) = &flat[idx];
            debug_assert_eq!(gname, name);
            idx += 1;
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; params.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; params.len()]);
            for i in 0..params.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                params[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
            }
        });
    }

    /// Serialize moment buffers as named blobs for checkpointing.
    pub fn to_blobs(&self) -> Vec<NamedBlob> {
        let mut out = Vec::new();
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        for name in names {
            out.push(NamedBlob {
                name: format!("adamw.m.{name}"),
                shape: vec![self.m[name].len()],
                data: self.m[name].clone(),
            });
            out.push(NamedBlob {
                name: format!("adamw.v.{name}"),
                shape: vec![self.v[name].len()],
                data: self.v[name].clone(),
            });
        }
        out
    }
}

/// Global L2-norm gradient clipping; returns the pre-clip norm.
pub fn clip_grads(grads: &mut AsrModel, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    grads.for_each_param(&mut |_, _, data| {
        for &v in data {
            sq += v * v;
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grads.for_each_param_mut(&mut |_, data| {
            for v in data {
                *v *= scale;
            }
        });
    }
    norm
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub linf: f64,
    pub regime: String,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub best_loss: f64,
    pub log: Vec<TrainLogEntry>,
    pub sinkhorn_nonconverged: usize,
}

fn batch_seed(base: u64, global_step: usize) -> u64 {
    base.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(global_step as u64)
}

/// CTC loss and parameter gradients on one batch in train mode.
fn supervised_grads(
    model: &AsrModel,
    batch: &FeatureBatch,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Box<AsrModel>)> {
    let (out, cache) = model.forward(batch, Mode::Train, Some(rng))?;
    let blank = model.cfg.n_classes - 1;
    let (loss, dlp) = ctc_loss(&out, &batch.label_indices, &batch.label_lengths, blank)?;
    let (grads, _) = model.backward(&cache, &dlp);
    Ok((loss, grads))
}

fn add_grads(a: &mut AsrModel, b: &AsrModel, scale: f64) {
    let mut flat: Vec<Vec<f64>> = Vec::new();
    b.for_each_param(&mut |_, _, data| flat.push(data.to_vec()));
    let mut idx = 0;
    a.for_each_param_mut(&mut |_, data| {
        for (d, g) in data.iter_mut().zip(&flat[idx]) {
            *d += scale * g;
        }
        idx += 1;
    });
}

fn scale_grads(a: &mut AsrModel, scale: f64) {
    a.for_each_param_mut(&mut |_, data| {
        for d in data {
            *d *= scale;
        }
    });
}

/// Train `model` on `examples` (already featurized) under `cfg`.
///
/// When `run_dir` is given, a JSON-lines training log plus per-epoch,
/// `best.ckpt`, and `last.ckpt` checkpoints are written there.
pub fn train(
    model: &mut AsrModel,
    examples: &[AudioExample],
    alphabet: &Alphabet,
    cfg: &TrainConfig,
    sinkhorn: &SinkhornConfig,
    run_dir: Option<&Path>,
    config_hash: &str,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    let n_batches_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_steps = n_batches_per_epoch * cfg.epochs;
    let sched = OneCycle::new(total_steps, cfg.lr_peak, cfg.pct_start);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(101));
    let mut log: Vec<TrainLogEntry> = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut final_loss = f64::NAN;
    let mut nonconverged = 0;

    let mut log_file = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::File::create(dir.join("train_log.jsonl"))?)
        }
        None => None,
    };

    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(cfg.batch_size) {
            let members: Vec<AudioExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let batch = make_batch(&members, alphabet)?;
            let batch_id = format!("epoch{epoch}/step{global_step}");

            // inner maximization
            let perturbation: Option<Perturbation> =
                match cfg.inner_attack(batch_seed(cfg.seed, global_step)) {
                    Some(atk) => Some(generate(model, &batch, &atk, sinkhorn)?),
                    None => None,
                };
            if let Some(p) = &perturbation {
                nonconverged += p.sinkhorn_nonconverged;
            }
            let train_batch = match &perturbation {
                Some(p) => p.apply(&batch),
                None => batch.clone(),
            };

            // outer minimization on the (adversarial) samples
            let (loss, mut grads) = supervised_grads(model, &train_batch, &mut dropout_rng)?;
            if cfg.mix_clean && perturbation.is_some() {
                let (clean_loss, clean_grads) = supervised_grads(model, &batch, &mut dropout_rng)?;
                add_grads(&mut grads, &clean_grads, 1.0);
                scale_grads(&mut grads, 0.5);
                if !clean_loss.is_finite() {
                    return Err(Error::Diverged {
                        batch_id,
                        msg: format!("non-finite clean loss {clean_loss}"),
                    });
                }
            }
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    batch_id,
                    msg: format!("non-finite loss {loss}"),
                });
            }
            let grad_norm = clip_grads(&mut grads, cfg.grad_clip);
            if !grad_norm.is_finite() {
                return Err(Error::Diverged {
                    batch_id,
                    msg: format!("non-finite gradient norm {grad_norm}"),
                });
            }
            let lr = sched.lr(global_step);
            opt.step(model, &grads, lr);

            let entry = TrainLogEntry {
                epoch,
                step: global_step,
                lr,
                loss,
                grad_norm,
                linf: perturbation.as_ref().map(|p| p.linf()).unwrap_or(0.0),
                regime: cfg.regime.to_string(),
            };
            if let Some(f) = &mut log_file {
                writeln!(f, "{}", serde_json::to_string(&entry)?)?;
            }
            final_loss = loss;
            log.push(entry);
            global_step += 1;
        }

        if let Some(dir) = run_dir {
            let meta = TrainingMeta {
                regime: cfg.regime.to_string(),
                epoch,
                seed: cfg.seed,
                rng_step: global_step as u64,
                config_hash: if config_hash.is_empty() {
                    None
                } else {
                    Some(config_hash.to_string())
                },
            };
            let ckpt = Checkpoint {
                model: model.clone(),
                alphabet: alphabet.clone(),
                meta,
                extra_blobs: opt.to_blobs(),
            };
            save_checkpoint(&ckpt, &dir.join(format!("epoch_{epoch}.ckpt")))?;
            save_checkpoint(&ckpt, &dir.join("last.ckpt"))?;
            if final_loss <= best_loss {
                save_checkpoint(&ckpt, &dir.join("best.ckpt"))?;
            }
        }
        if final_loss <= best_loss {
            best_loss = final_loss;
        }
    }

    Ok(TrainSummary {
        epochs_run: cfg.epochs,
        final_loss,
        best_loss,
        log,
        sinkhorn_nonconverged: nonconverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::MelConfig;
    use crate::data::synth_toy_corpus;
    use crate::model::ModelConfig;

    fn small_model_cfg() -> ModelConfig {
        ModelConfig {
            n_rescnn_blocks: 1,
            n_birnn_layers: 1,
            rnn_hidden: 8,
            conv_channels: 6,
            fc_hidden: 8,
            mel_bins: 16,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn toy_examples(n: usize) -> Vec<crate::data::AudioExample> {
        let mel = MelConfig {
            mel_bins: 16,
            ..MelConfig::default()
        };
        let mut ex = synth_toy_corpus(5, n);
        for e in &mut ex {
            e.featurize(&mel).unwrap();
        }
        ex
    }

    #[test]
    fn one_cycle_hits_peak_exactly() {
        let sched = OneCycle::new(100, 0.0005, 0.3);
        assert!((sched.max_lr() - 0.0005).abs() < 1e-9);
        assert!(sched.lr(0) < 0.0005);
        assert!(sched.lr(100) < sched.lr(30));
    }

    #[test]
    fn adamw_decays_weights_without_gradient() {
        let cfg = small_model_cfg();
        let mut model = AsrModel::new(&cfg, 3);
        let grads = model.zeros_like();
        let mut opt = AdamW::new(0.1);
        let before: f64 = {
            let mut s = 0.0;
            model.for_each_param(&mut |_, _, d| s += d.iter().map(|v| v * v).sum::<f64>());
            s
        };
        opt.step(&mut model, &grads, 0.01);
        let after: f64 = {
            let mut s = 0.0;
            model.for_each_param(&mut |_, _, d| s += d.iter().map(|v| v * v).sum::<f64>());
            s
        };
        assert!(after < before);
    }

    #[test]
    fn clip_reduces_norm() {
        let cfg = small_model_cfg();
        let mut grads = AsrModel::new(&cfg, 3);
        let norm = clip_grads(&mut grads, 0.5);
        assert!(norm > 0.5);
        let after = clip_grads(&mut grads, 1e9);
        assert!((after - 0.5).abs() < 1e-9);
    }

    #[test]
    fn standard_training_reduces_loss_and_is_deterministic() {
        let ex = toy_examples(6);
        let alphabet = Alphabet::default();
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 3,
            lr_peak: 0.003,
            seed: 7,
            ..TrainConfig::default()
        };
        let sk = SinkhornConfig::default();
        let mut m1 = AsrModel::new(&small_model_cfg(), 1);
        let s1 = train(&mut m1, &ex, &alphabet, &cfg, &sk, None, "").unwrap();
        assert!(
            s1.final_loss < s1.log[0].loss,
            "loss {} -> {}",
            s1.log[0].loss,
            s1.final_loss
        );
        let mut m2 = AsrModel::new(&small_model_cfg(), 1);
        let s2 = train(&mut m2, &ex, &alphabet, &cfg, &sk, None, "").unwrap();
        assert_eq!(m1.param_hash(), m2.param_hash());
        assert_eq!(s1.final_loss, s2.final_loss);
    }

    #[test]
    fn mixpgd_training_runs_and_checkpoints() {
        let ex = toy_examples(4);
        let alphabet = Alphabet::default();
        let cfg = TrainConfig {
            regime: Regime::Mixpgd,
            epochs: 2,
            batch_size: 2,
            inner_steps: 2,
            epsilon: 0.01,
            seed: 3,
            ..TrainConfig::default()
        };
        let sk = SinkhornConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let mut model = AsrModel::new(&small_model_cfg(), 1);
        let summary = train(&mut model, &ex, &alphabet, &cfg, &sk, Some(dir.path()), "abc").unwrap();
        assert_eq!(summary.epochs_run, 2);
        for name in ["epoch_0.ckpt", "epoch_1.ckpt", "best.ckpt", "last.ckpt", "train_log.jsonl"] {
            assert!(dir.path().join(name).exists(), "missing {name}");
        }
        let ckpt = crate::model::checkpoint::load_checkpoint(&dir.path().join("last.ckpt")).unwrap();
        assert_eq!(ckpt.model.param_hash(), model.param_hash());
        assert_eq!(ckpt.meta.regime, "mixpgd");
        assert!(ckpt.extra_blobs.iter().any(|b| b.name.starts_with("adamw.m.")));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
