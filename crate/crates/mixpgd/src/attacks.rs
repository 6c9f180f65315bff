//! Batch adversarial-example generators over the model-input feature tensor
//! under an L∞ budget: FGSM, MIFGSM, PGD, feature scattering, and mixPGD.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::FeatureBatch;
use crate::losses::{ctc_loss, unsup_loss, SinkhornConfig, UnsupKind};
use crate::model::{layers::mask_time, AsrModel, Mode, ModelOutput};
use crate::{Error, Result};

/// Standard deviation of the Gaussian initialization used by mixPGD.
pub const MIXPGD_INIT_STD: f64 = 0.0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Fgsm,
    Mifgsm,
    Pgd,
    FeatureScattering,
    Mixpgd,
}

impl std::fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Mifgsm => "mifgsm",
            AttackFamily::Pgd => "pgd",
            AttackFamily::FeatureScattering => "feature_scattering",
            AttackFamily::Mixpgd => "mixpgd",
        };
        f.write_str(s)
    }
}

/// Attack parameters; serializable so a content hash can tag every report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub family: AttackFamily,
    /// L∞ budget in model-input (normalized feature) units.
    pub epsilon: f64,
    pub step_size: f64,
    pub n_steps: usize,
    /// Weight of the unsupervised term (mixpgd only).
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_unsup")]
    pub unsup_kind: UnsupKind,
    /// Momentum decay μ (mifgsm only).
    #[serde(default = "default_momentum")]
    pub momentum_decay: f64,
    #[serde(default = "default_random_init")]
    pub random_init: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_beta() -> f64 {
    1.0
}
fn default_unsup() -> UnsupKind {
    UnsupKind::Ot
}
fn default_momentum() -> f64 {
    1.0
}
fn default_random_init() -> bool {
    true
}

impl AttackConfig {
    pub fn new(family: AttackFamily, epsilon: f64) -> Self {
        let n_steps = match family {
            AttackFamily::Fgsm => 1,
            AttackFamily::Mifgsm => 10,
            AttackFamily::Pgd => 20,
            AttackFamily::FeatureScattering | AttackFamily::Mixpgd => 4,
        };
        let step_size = match family {
            AttackFamily::Fgsm => epsilon,
            _ => epsilon / 4.0,
        };
        AttackConfig {
            family,
            epsilon,
            step_size,
            n_steps,
            beta: default_beta(),
            unsup_kind: default_unsup(),
            momentum_decay: default_momentum(),
            random_init: default_random_init(),
            seed: 0,
        }
    }

    pub fn with_steps(mut self, n_steps: usize) -> Self {
        self.n_steps = n_steps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::Config("attack epsilon must be non-negative".into()));
        }
        if self.step_size <= 0.0 && self.epsilon > 0.0 {
            return Err(Error::Config("attack step_size must be positive".into()));
        }
        if self.family == AttackFamily::Fgsm && self.n_steps != 1 {
            return Err(Error::Config("fgsm implies n_steps == 1".into()));
        }
        if self.n_steps >= 1 && self.family != AttackFamily::Fgsm && self.step_size > self.epsilon && self.epsilon > 0.0 {
            return Err(Error::Config(
                "step_size must not exceed epsilon for iterative attacks".into(),
            ));
        }
        Ok(())
    }

    /// Content hash of this config, stable across runs.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("attack config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let hex = format!("{:x}", hasher.finalize());
        hex[..16].to_string()
    }

    /// Display name following the PGD20/PGD100 convention.
    pub fn display_name(&self) -> String {
        match self.family {
            AttackFamily::Pgd => format!("pgd{}", self.n_steps),
            _ => self.family.to_string(),
        }
    }
}

/// An L∞-bounded feature-space perturbation, zero on padding frames.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub delta: Array3<f64>,
    pub epsilon_used: f64,
    /// Number of Sinkhorn solves that hit max_iters without converging.
    pub sinkhorn_nonconverged: usize,
}

impl Perturbation {
    pub fn zeros(batch: &FeatureBatch, epsilon: f64) -> Self {
        Perturbation {
            delta: Array3::zeros(batch.features.raw_dim()),
            epsilon_used: epsilon,
            sinkhorn_nonconverged: 0,
        }
    }

    pub fn linf(&self) -> f64 {
        self.delta.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    /// The perturbed batch; delta is masked to valid frames on construction,
    /// so padding stays exactly zero.
    pub fn apply(&self, batch: &FeatureBatch) -> FeatureBatch {
        let mut out = batch.clone();
        out.features = &batch.features + &self.delta;
        out.mask_padding();
        out
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clamp_mask(delta: &mut Array3<f64>, epsilon: f64, lengths: &[usize]) {
    delta.mapv_inplace(|v| v.clamp(-epsilon, epsilon));
    mask_time(delta, lengths);
}

/// CTC loss and its gradient w.r.t. the (perturbed) input features.
fn ctc_feature_grad(
    model: &AsrModel,
    batch: &FeatureBatch,
    delta: &Array3<f64>,
) -> Result<(f64, Array3<f64>)> {
    let mut adv = batch.clone();
    adv.features = &batch.features + delta;
    adv.mask_padding();
    let (out, cache) = model.forward(&adv, Mode::Eval, None)?;
    let blank = model.cfg.n_classes - 1;
    let (loss, dlp) = ctc_loss(&out, &batch.label_indices, &batch.label_lengths, blank)?;
    let (_, d_feat) = model.backward(&cache, &dlp);
    Ok((loss, d_feat))
}

/// Combined CTC + β·unsupervised loss gradient w.r.t. the input features.
/// `clean_output` is held fixed. Returns (loss, grad, nonconverged count).
#[allow(clippy::too_many_arguments)]
fn mixed_feature_grad(
    model: &AsrModel,
    batch: &FeatureBatch,
    delta: &Array3<f64>,
    clean_output: &ModelOutput,
    beta: f64,
    unsup_kind: UnsupKind,
    sinkhorn: &SinkhornConfig,
    supervised: bool,
) -> Result<(f64, Array3<f64>, usize)> {
    let mut adv = batch.clone();
    adv.features = &batch.features + delta;
    adv.mask_padding();
    let (out, cache) = model.forward(&adv, Mode::Eval, None)?;
    let blank = model.cfg.n_classes - 1;
    let mut total = 0.0;
    let mut dlp = Array3::zeros(out.log_probs.raw_dim());
    if supervised {
        let (ctc, g) = ctc_loss(&out, &batch.label_indices, &batch.label_lengths, blank)?;
        total += ctc;
        dlp += &g;
    }
    let mut nonconverged = 0;
    if beta != 0.0 {
        let (unsup, g, nc) = unsup_loss(clean_output, &out, unsup_kind, sinkhorn)?;
        nonconverged = nc;
        total += beta * unsup;
        dlp += &(g * beta);
    }
    let (_, d_feat) = model.backward(&cache, &dlp);
    Ok((total, d_feat, nonconverged))
}

/// Single sign-of-gradient step of size ε on the CTC loss.
pub fn fgsm(model: &AsrModel, batch: &FeatureBatch, cfg: &AttackConfig) -> Result<Perturbation> {
    cfg.validate()?;
    let (_, grad) = ctc_feature_grad(model, batch, &Array3::zeros(batch.features.raw_dim()))?;
    let mut delta = grad.mapv(|g| cfg.epsilon * sign(g));
    mask_time(&mut delta, &batch.feature_lengths);
    Ok(Perturbation {
        delta,
        epsilon_used: cfg.epsilon,
        sinkhorn_nonconverged: 0,
    })
}

/// Momentum-iterative FGSM: accumulate L1-normalized gradients with decay μ
/// and step on the sign of the accumulator.
pub fn mifgsm(model: &AsrModel, batch: &FeatureBatch, cfg: &AttackConfig) -> Result<Perturbation> {
    cfg.validate()?;
    let mut delta = Array3::zeros(batch.features.raw_dim());
    let mut momentum = Array3::zeros(batch.features.raw_dim());
    for _ in 0..cfg.n_steps {
        let (_, grad) = ctc_feature_grad(model, batch, &delta)?;
        // per-example L1 normalization
        let (b, _, _) = grad.dim();
        let mut normalized = grad;
        for i in 0..b {
            let mut ex = normalized.slice_mut(ndarray::s![i, .., ..]);
            let l1: f64 = ex.iter().map(|v| v.abs()).sum();
            if l1 > 1e-12 {
                ex.mapv_inplace(|v| v / l1);
            }
        }
        momentum.zip_mut_with(&normalized, |m, &g| *m = cfg.momentum_decay * *m + g);
        delta.zip_mut_with(&momentum, |d, &m| *d += cfg.step_size * sign(m));
        clamp_mask(&mut delta, cfg.epsilon, &batch.feature_lengths);
    }
    Ok(Perturbation {
        delta,
        epsilon_used: cfg.epsilon,
        sinkhorn_nonconverged: 0,
    })
}

/// PGD from a caller-supplied initial delta: `n_steps` CTC sign-ascent steps
/// with elementwise projection onto the ε-ball after each step.
pub fn pgd_from_init(
    model: &AsrModel,
    batch: &FeatureBatch,
    cfg: &AttackConfig,
    init: Array3<f64>,
) -> Result<Perturbation> {
    let mut delta = init;
    clamp_mask(&mut delta, cfg.epsilon, &batch.feature_lengths);
    for _ in 0..cfg.n_steps {
        let (_, grad) = ctc_feature_grad(model, batch, &delta)?;
        delta.zip_mut_with(&grad, |d, &g| *d += cfg.step_size * sign(g));
        clamp_mask(&mut delta, cfg.epsilon, &batch.feature_lengths);
    }
    Ok(Perturbation {
        delta,
        epsilon_used: cfg.epsilon,
        sinkhorn_nonconverged: 0,
    })
}

/// Projected gradient descent on the CTC loss, optionally with uniform
/// random initialization in [−ε, ε].
pub fn pgd(model: &AsrModel, batch: &FeatureBatch, cfg: &AttackConfig) -> Result<Perturbation> {
    cfg.validate()?;
    let init = if cfg.random_init {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Array3::from_shape_fn(batch.features.dim(), |_| {
            rng.gen_range(-cfg.epsilon..=cfg.epsilon)
        })
    } else {
        Array3::zeros(batch.features.raw_dim())
    };
    pgd_from_init(model, batch, cfg, init)
}

/// Feature scattering: label-free sign ascent on the OT distance between the
/// clean predictions (computed once) and the perturbed predictions.
pub fn feature_scattering(
    model: &AsrModel,
    batch: &FeatureBatch,
    cfg: &AttackConfig,
    sinkhorn: &SinkhornConfig,
) -> Result<Perturbation> {
    cfg.validate()?;
    let (clean_output, _) = model.forward(batch, Mode::Eval, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut delta = Array3::from_shape_fn(batch.features.dim(), |_| {
        if cfg.epsilon > 0.0 {
            rng.gen_range(-cfg.epsilon..=cfg.epsilon)
        } else {
            0.0
        }
    });
    clamp_mask(&mut delta, cfg.epsilon, &batch.feature_lengths);
    let mut nonconverged = 0;
    for _ in 0..cfg.n_steps {
        let (_, grad, nc) = mixed_feature_grad(
            model,
            batch,
            &delta,
            &clean_output,
            1.0,
            cfg.unsup_kind,
            sinkhorn,
            false,
        )?;
        nonconverged += nc;
        delta.zip_mut_with(&grad, |d, &g| *d += cfg.step_size * sign(g));
        clamp_mask(&mut delta, cfg.epsilon, &batch.feature_lengths);
    }
    Ok(Perturbation {
        delta,
        epsilon_used: cfg.epsilon,
        sinkhorn_nonconverged: nonconverged,
    })
}

/// The Gaussian initialization used by mixPGD, exposed so reductions can be
/// tested against PGD from the same start.
pub fn mixpgd_init(batch: &FeatureBatch, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn(batch.features.dim(), |_| {
        let n: f64 = StandardNormal.sample(&mut rng);
        MIXPGD_INIT_STD * n
    })
}

/// Hybrid supervised + unsupervised generator: Gaussian init, then sign
/// ascent on CTC + β·(OT or KL) with the clean predictions held fixed.
pub fn mixpgd(
    model: &AsrModel,
    batch: &FeatureBatch,
    cfg: &AttackConfig,
    sinkhorn: &SinkhornConfig,
) -> Result<Perturbation> {
    cfg.validate()?;
    let (clean_output, _) = model.forward(batch, Mode::Eval, None)?;
    let mut delta = mixpgd_init(batch, cfg.seed);
    clamp_mask(&mut delta, cfg.epsilon, &batch.feature_lengths);
    let mut nonconverged = 0;
    for _ in 0..cfg.n_steps {
        let (_, grad, nc) = mixed_feature_grad(
            model,
            batch,
            &delta,
            &clean_output,
            cfg.beta,
            cfg.unsup_kind,
            sinkhorn,
            true,
        )?;
        nonconverged += nc;
        delta.zip_mut_with(&grad, |d, &g| *d += cfg.step_size * sign(g));
        clamp_mask(&mut delta, cfg.epsilon, &batch.feature_lengths);
    }
    Ok(Perturbation {
        delta,
        epsilon_used: cfg.epsilon,
        sinkhorn_nonconverged: nonconverged,
    })
}

/// Dispatch on the configured family.
pub fn generate(
    model: &AsrModel,
    batch: &FeatureBatch,
    cfg: &AttackConfig,
    sinkhorn: &SinkhornConfig,
) -> Result<Perturbation> {
    match cfg.family {
        AttackFamily::Fgsm => fgsm(model, batch, cfg),
        AttackFamily::Mifgsm => mifgsm(model, batch, cfg),
        AttackFamily::Pgd => pgd(model, batch, cfg),
        AttackFamily::FeatureScattering => feature_scattering(model, batch, cfg, sinkhorn),
        AttackFamily::Mixpgd => mixpgd(model, batch, cfg, sinkhorn),
    }
}
