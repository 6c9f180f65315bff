//! The recognizer: convolutional front-end, residual CNN blocks,
//! bidirectional GRU layers, and a fully connected classifier emitting
//! per-frame character log-probabilities. Forward and backward are explicit
//! so gradients are available w.r.t. both parameters and input features.

pub mod checkpoint;
pub mod decode;
pub mod layers;

use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::cell::Cell;

use crate::data::FeatureBatch;
use crate::{Error, Result};
use layers::{dropout, mask_time, relu, reverse_time, Conv1d, GruCache, GruDir, LayerNorm, LayerNormCache, Linear};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMeta};
pub use decode::greedy_decode;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_rescnn_blocks: usize,
    pub n_birnn_layers: usize,
    pub rnn_hidden: usize,
    /// Alphabet size plus one for blank.
    pub n_classes: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    /// Time-axis stride of the front-end convolution.
    pub conv_downsample_factor: usize,
    pub fc_hidden: usize,
    pub dropout: f64,
    pub mel_bins: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_rescnn_blocks: 2,
            n_birnn_layers: 2,
            rnn_hidden: 128,
            n_classes: 29,
            conv_channels: 32,
            conv_kernel: 3,
            conv_downsample_factor: 2,
            fc_hidden: 128,
            dropout: 0.1,
            mel_bins: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, alphabet_len: usize) -> Result<()> {
        if self.n_classes != alphabet_len + 1 {
            return Err(Error::Config(format!(
                "n_classes must equal alphabet size + 1 ({} + 1), got {}",
                alphabet_len, self.n_classes
            )));
        }
        if self.conv_downsample_factor < 1 {
            return Err(Error::Config("conv_downsample_factor must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Forward mode: train enables dropout, eval is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-frame log-probabilities `[batch, out_time, n_classes]` plus valid
/// output lengths.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub log_probs: Array3<f64>,
    pub out_lengths: Vec<usize>,
}

#[derive(Debug, Clone)]
struct ResBlock {
    ln1: LayerNorm,
    conv1: Conv1d,
    ln2: LayerNorm,
    conv2: Conv1d,
}

#[derive(Debug, Clone)]
struct GruLayer {
    ln: LayerNorm,
    fwd: GruDir,
    bwd: GruDir,
}

/// The recognizer parameters. A mirror instance produced by [`AsrModel::zeros_like`]
/// holds gradients.
#[derive(Debug, Clone)]
pub struct AsrModel {
    pub cfg: ModelConfig,
    front: Conv1d,
    front_ln: LayerNorm,
    blocks: Vec<ResBlock>,
    grus: Vec<GruLayer>,
    head_ln: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    grad_queries: Cell<u64>,
}

#[derive(Debug)]
struct BlockCache {
    ln1: LayerNormCache,
    r1_mask: Array3<f64>,
    ra: Array3<f64>,
    drop_mask: Array3<f64>,
    ln2: LayerNormCache,
    r2_mask: Array3<f64>,
    rb: Array3<f64>,
}

#[derive(Debug)]
struct GruLayerCache {
    ln: LayerNormCache,
    g: Array3<f64>,
    gr: Array3<f64>,
    fwd: GruCache,
    bwd: GruCache,
    drop_mask: Array3<f64>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug)]
pub struct Cache {
    features: Array3<f64>,
    out_lengths: Vec<usize>,
    front_ln: LayerNormCache,
    front_out: Array3<f64>,
    relu0_mask: Array3<f64>,
    blocks: Vec<BlockCache>,
    grus: Vec<GruLayerCache>,
    head_ln: LayerNormCache,
    head_ln_out: Array3<f64>,
    fc1_out_mask: Array3<f64>,
    head_drop_mask: Array3<f64>,
    fc2_in: Array3<f64>,
    /// log-probs in `[batch, classes, time]` layout.
    lp_ct: Array3<f64>,
}

fn log_softmax_channels(x: &Array3<f64>) -> Array3<f64> {
    let (b, k, t) = x.dim();
    let mut y = Array3::zeros((b, k, t));
    for bi in 0..b {
        for ti in 0..t {
            let col = x.slice(s![bi, .., ti]);
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for ki in 0..k {
                y[[bi, ki, ti]] = x[[bi, ki, ti]] - lse;
            }
        }
    }
    y
}

impl AsrModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.conv_channels;
        let front = Conv1d::new(
            cfg.mel_bins,
            c,
            cfg.conv_kernel,
            cfg.conv_downsample_factor,
            cfg.conv_kernel / 2,
            &mut rng,
        );
        let front_ln = LayerNorm::new(c);
        let blocks = (0..cfg.n_rescnn_blocks)
            .map(|_| ResBlock {
                ln1: LayerNorm::new(c),
                conv1: Conv1d::new(c, c, cfg.conv_kernel, 1, cfg.conv_kernel / 2, &mut rng),
                ln2: LayerNorm::new(c),
                conv2: Conv1d::new(c, c, cfg.conv_kernel, 1, cfg.conv_kernel / 2, &mut rng),
            })
            .collect();
        let h = cfg.rnn_hidden;
        let grus = (0..cfg.n_birnn_layers)
            .map(|i| {
                let in_dim = if i == 0 { c } else { 2 * h };
                GruLayer {
                    ln: LayerNorm::new(in_dim),
                    fwd: GruDir::new(in_dim, h, &mut rng),
                    bwd: GruDir::new(in_dim, h, &mut rng),
                }
            })
            .collect();
        let head_in = if cfg.n_birnn_layers > 0 { 2 * h } else { c };
        AsrModel {
            cfg: cfg.clone(),
            front,
            front_ln,
            blocks,
            grus,
            head_ln: LayerNorm::new(head_in),
            fc1: Linear::new(head_in, cfg.fc_hidden, &mut rng),
            fc2: Linear::new(cfg.fc_hidden, cfg.n_classes, &mut rng),
            grad_queries: Cell::new(0),
        }
    }

    /// A same-shape model with all parameters zero, used as a gradient holder.
    pub fn zeros_like(&self) -> Self {
        AsrModel {
            cfg: self.cfg.clone(),
            front: self.front.zeros_like(),
            front_ln: self.front_ln.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResBlock {
                    ln1: b.ln1.zeros_like(),
                    conv1: b.conv1.zeros_like(),
                    ln2: b.ln2.zeros_like(),
                    conv2: b.conv2.zeros_like(),
                })
                .collect(),
            grus: self
                .grus
                .iter()
                .map(|g| GruLayer {
                    ln: g.ln.zeros_like(),
                    fwd: g.fwd.zeros_like(),
                    bwd: g.bwd.zeros_like(),
                })
                .collect(),
            head_ln: self.head_ln.zeros_like(),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
            grad_queries: Cell::new(0),
        }
    }

    /// Output length after the front-end downsampling.
    pub fn out_len(&self, in_len: usize) -> usize {
        self.front.out_len(in_len)
    }

    pub fn grad_queries(&self) -> u64 {
        self.grad_queries.get()
    }

    pub fn reset_grad_queries(&self) {
        self.grad_queries.set(0);
    }

    /// Forward pass. `rng` drives dropout and is required in train mode with
    /// non-zero dropout.
    pub fn forward(
        &self,
        batch: &FeatureBatch,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ModelOutput, Cache)> {
        let (b, m, _t) = batch.features.dim();
        if m != self.cfg.mel_bins {
            return Err(Error::Shape {
                context: "front convolution input".into(),
                expected: format!("{} mel bins", self.cfg.mel_bins),
                got: format!("{m}"),
            });
        }
        let p = if mode == Mode::Train { self.cfg.dropout } else { 0.0 };
        let mut local_rng = ChaCha8Rng::seed_from_u64(0);
        let rng = match (rng, p > 0.0) {
            (Some(r), _) => r,
            (None, false) => &mut local_rng,
            (None, true) => {
                return Err(Error::Invalid(
                    "train-mode forward with dropout requires an RNG".into(),
                ))
            }
        };
        let out_lengths: Vec<usize> = batch
            .feature_lengths
            .iter()
            .map(|&l| self.front.out_len(l))
            .collect();
        let lens = &out_lengths;

        let mut x = self.front.forward(&batch.features);
        mask_time(&mut x, lens);
        let front_out = x.clone();
        let (mut x, front_ln_cache) = {
            let (y, c) = self.front_ln.forward(&x);
            (y, c)
        };
        mask_time(&mut x, lens);
        let (mut x, relu0_mask) = relu(&x);

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let xin = x.clone();
            let (mut a, ln1) = blk.ln1.forward(&xin);
            mask_time(&mut a, lens);
            let (ra, r1_mask) = relu(&a);
            let mut c1 = blk.conv1.forward(&ra);
            mask_time(&mut c1, lens);
            let (d1, drop_mask) = dropout(&c1, p, rng);
            let (mut b2, ln2) = blk.ln2.forward(&d1);
            mask_time(&mut b2, lens);
            let (rb, r2_mask) = relu(&b2);
            let mut c2 = blk.conv2.forward(&rb);
            mask_time(&mut c2, lens);
            x = &xin + &c2;
            block_caches.push(BlockCache {
                ln1,
                r1_mask,
                ra,
                drop_mask,
                ln2,
                r2_mask,
                rb,
            });
        }

        let mut gru_caches = Vec::with_capacity(self.grus.len());
        for layer in &self.grus {
            let (mut g, ln) = layer.ln.forward(&x);
            mask_time(&mut g, lens);
            let fwd = layer.fwd.forward(&g);
            let gr = reverse_time(&g, lens);
            let bwd = layer.bwd.forward(&gr);
            let hb = reverse_time(&bwd.h, lens);
            let h_dim = layer.fwd.hidden();
            let mut h = Array3::zeros((b, 2 * h_dim, fwd.h.dim().2));
            h.slice_mut(s![.., ..h_dim, ..]).assign(&fwd.h);
            h.slice_mut(s![.., h_dim.., ..]).assign(&hb);
            mask_time(&mut h, lens);
            let (hd, drop_mask) = dropout(&h, p, rng);
            x = hd;
            gru_caches.push(GruLayerCache {
                ln,
                g,
                gr,
                fwd,
                bwd,
                drop_mask,
            });
        }

        let (mut hn, head_ln) = self.head_ln.forward(&x);
        mask_time(&mut hn, lens);
        let head_ln_out = hn.clone();
        let f1 = self.fc1.forward(&hn);
        let (f1_relu, fc1_out_mask) = relu(&f1);
        let (fc2_in, head_drop_mask) = dropout(&f1_relu, p, rng);
        let logits = self.fc2.forward(&fc2_in);
        let lp_ct = log_softmax_channels(&logits);

        // [b, classes, time] -> [b, time, classes]
        let log_probs = lp_ct.clone().permuted_axes([0, 2, 1]).as_standard_layout().to_owned();
        let output = ModelOutput {
            log_probs,
            out_lengths: out_lengths.clone(),
        };
        let cache = Cache {
            features: batch.features.clone(),
            out_lengths,
            front_ln: front_ln_cache,
            front_out,
            relu0_mask,
            blocks: block_caches,
            grus: gru_caches,
            head_ln,
            head_ln_out,
            fc1_out_mask,
            head_drop_mask,
            fc2_in,
            lp_ct,
        };
        Ok((output, cache))
    }

    /// Backward pass from a gradient w.r.t. the output log-probs
    /// `[batch, out_time, classes]`. Returns parameter gradients and the
    /// gradient w.r.t. the input features.
    pub fn backward(&self, cache: &Cache, d_log_probs: &Array3<f64>) -> (Box<AsrModel>, Array3<f64>) {
        self.grad_queries.set(self.grad_queries.get() + 1);
        let mut grads = Box::new(self.zeros_like());
        let lens = &cache.out_lengths;
        let (b, t, k) = d_log_probs.dim();

        // to [b, classes, time], then through log_softmax
        let mut dlp = Array3::zeros((b, k, t));
        for bi in 0..b {
            for ti in 0..t {
                for ki in 0..k {
                    dlp[[bi, ki, ti]] = d_log_probs[[bi, ti, ki]];
                }
            }
        }
        let mut dlogits = Array3::zeros((b, k, t));
        for bi in 0..b {
            for ti in 0..t {
                let dsum: f64 = (0..k).map(|ki| dlp[[bi, ki, ti]]).sum();
                for ki in 0..k {
                    let p = cache.lp_ct[[bi, ki, ti]].exp();
                    dlogits[[bi, ki, ti]] = dlp[[bi, ki, ti]] - p * dsum;
                }
            }
        }
        mask_time(&mut dlogits, lens);

        let d_fc2_in = self.fc2.backward(&cache.fc2_in, &dlogits, &mut grads.fc2);
        let d_f1_relu = &d_fc2_in * &cache.head_drop_mask;
        let d_f1 = &d_f1_relu * &cache.fc1_out_mask;
        let mut d_hn = self.fc1.backward(&cache.head_ln_out, &d_f1, &mut grads.fc1);
        mask_time(&mut d_hn, lens);
        let mut dx = self.head_ln.backward(&cache.head_ln, &d_hn, &mut grads.head_ln);
        mask_time(&mut dx, lens);

        for (layer, (gcache, glayer_grad)) in self
            .grus
            .iter()
            .zip(cache.grus.iter().zip(grads.grus.iter_mut()))
            .rev()
        {
            let dh_total = &dx * &gcache.drop_mask;
            let h_dim = layer.fwd.hidden();
            let dh_f = dh_total.slice(s![.., ..h_dim, ..]).to_owned();
            let dh_b_aligned = dh_total.slice(s![.., h_dim.., ..]).to_owned();
            let dh_b = reverse_time(&dh_b_aligned, lens);
            let dg_f = layer.fwd.backward(&gcache.g, &gcache.fwd, &dh_f, &mut glayer_grad.fwd);
            let dgr = layer.bwd.backward(&gcache.gr, &gcache.bwd, &dh_b, &mut glayer_grad.bwd);
            let dg_b = reverse_time(&dgr, lens);
            let mut dg = &dg_f + &dg_b;
            mask_time(&mut dg, lens);
            let mut dxin = layer.ln.backward(&gcache.ln, &dg, &mut glayer_grad.ln);
            mask_time(&mut dxin, lens);
            dx = dxin;
        }

        for (blk, (bcache, bgrad)) in self
            .blocks
            .iter()
            .zip(cache.blocks.iter().zip(grads.blocks.iter_mut()))
            .rev()
        {
            // residual: dx flows both into the block body and the skip
            let mut dc2 = dx.clone();
            mask_time(&mut dc2, lens);
            let d_rb = blk.conv2.backward(&bcache.rb, &dc2, &mut bgrad.conv2);
            let d_b2 = &d_rb * &bcache.r2_mask;
            let mut d_b2m = d_b2;
            mask_time(&mut d_b2m, lens);
            let d_d1 = blk.ln2.backward(&bcache.ln2, &d_b2m, &mut bgrad.ln2);
            let mut d_c1 = &d_d1 * &bcache.drop_mask;
            mask_time(&mut d_c1, lens);
            let d_ra = blk.conv1.backward(&bcache.ra, &d_c1, &mut bgrad.conv1);
            let d_a = &d_ra * &bcache.r1_mask;
            let mut d_am = d_a;
            mask_time(&mut d_am, lens);
            let mut d_xin = blk.ln1.backward(&bcache.ln1, &d_am, &mut bgrad.ln1);
            mask_time(&mut d_xin, lens);
            dx = &dx + &d_xin;
        }

        let d_relu0 = &dx * &cache.relu0_mask;
        let mut d_front_ln = d_relu0;
        mask_time(&mut d_front_ln, lens);
        let mut d_front_out = self
            .front_ln
            .backward(&cache.front_ln, &d_front_ln, &mut grads.front_ln);
        mask_time(&mut d_front_out, lens);
        let _ = &cache.front_out;
        let d_features = self
            .front
            .backward(&cache.features, &d_front_out, &mut grads.front);
        (grads, d_features)
    }

    /// Visit every parameter tensor as `(name, shape, data)`.
    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let visit_conv = |name: &str, c: &Conv1d, f: &mut dyn FnMut(&str, &[usize], &[f64])| {
            f(&format!("{name}.w"), c.w.shape(), c.w.as_slice().unwrap());
            f(&format!("{name}.b"), c.b.shape(), c.b.as_slice().unwrap());
        };
        let visit_ln = |name: &str, l: &LayerNorm, f: &mut dyn FnMut(&str, &[usize], &[f64])| {
            f(&format!("{name}.gamma"), l.gamma.shape(), l.gamma.as_slice().unwrap());
            f(&format!("{name}.beta"), l.beta.shape(), l.beta.as_slice().unwrap());
        };
        let visit_lin = |name: &str, l: &Linear, f: &mut dyn FnMut(&str, &[usize], &[f64])| {
            f(&format!("{name}.w"), l.w.shape(), l.w.as_slice().unwrap());
            f(&format!("{name}.b"), l.b.shape(), l.b.as_slice().unwrap());
        };
        let visit_gru = |name: &str, g: &GruDir, f: &mut dyn FnMut(&str, &[usize], &[f64])| {
            for (suffix, arr) in [
                ("wz", &g.wz),
                ("wr", &g.wr),
                ("wn", &g.wn),
                ("uz", &g.uz),
                ("ur", &g.ur),
                ("un", &g.un),
            ] {
                f(&format!("{name}.{suffix}"), arr.shape(), arr.as_slice().unwrap());
            }
            for (suffix, arr) in [("bz", &g.bz), ("br", &g.br), ("bn", &g.bn), ("bhn", &g.bhn)] {
                f(&format!("{name}.{suffix}"), arr.shape(), arr.as_slice().unwrap());
            }
        };
        visit_conv("front", &self.front, f);
        visit_ln("front_ln", &self.front_ln, f);
        for (i, blk) in self.blocks.iter().enumerate() {
            visit_ln(&format!("block{i}.ln1"), &blk.ln1, f);
            visit_conv(&format!("block{i}.conv1"), &blk.conv1, f);
            visit_ln(&format!("block{i}.ln2"), &blk.ln2, f);
            visit_conv(&format!("block{i}.conv2"), &blk.conv2, f);
        }
        for (i, g) in self.grus.iter().enumerate() {
            visit_ln(&format!("gru{i}.ln"), &g.ln, f);
            visit_gru(&format!("gru{i}.fwd"), &g.fwd, f);
            visit_gru(&format!("gru{i}.bwd"), &g.bwd, f);
        }
        visit_ln("head_ln", &self.head_ln, f);
        visit_lin("fc1", &self.fc1, f);
        visit_lin("fc2", &self.fc2, f);
    }

    /// Visit every parameter tensor mutably, in the same order as
    /// [`Self::for_each_param`].
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        let visit_conv = |name: &str, c: &mut Conv1d, f: &mut dyn FnMut(&str, &mut [f64])| {
            f(&format!("{name}.w"), c.w.as_slice_mut().unwrap());
            f(&format!("{name}.b"), c.b.as_slice_mut().unwrap());
        };
        let visit_ln = |name: &str, l: &mut LayerNorm, f: &mut dyn FnMut(&str, &mut [f64])| {
            f(&format!("{name}.gamma"), l.gamma.as_slice_mut().unwrap());
            f(&format!("{name}.beta"), l.beta.as_slice_mut().unwrap());
        };
        let visit_lin = |name: &str, l: &mut Linear, f: &mut dyn FnMut(&str, &mut [f64])| {
            f(&format!("{name}.w"), l.w.as_slice_mut().unwrap());
            f(&format!("{name}.b"), l.b.as_slice_mut().unwrap());
        };
        let visit_gru = |name: &str, g: &mut GruDir, f: &mut dyn FnMut(&str, &mut [f64])| {
            f(&format!("{name}.wz"), g.wz.as_slice_mut().unwrap());
            f(&format!("{name}.wr"), g.wr.as_slice_mut().unwrap());
            f(&format!("{name}.wn"), g.wn.as_slice_mut().unwrap());
            f(&format!("{name}.uz"), g.uz.as_slice_mut().unwrap());
            f(&format!("{name}.ur"), g.ur.as_slice_mut().unwrap());
            f(&format!("{name}.un"), g.un.as_slice_mut().unwrap());
            f(&format!("{name}.bz"), g.bz.as_slice_mut().unwrap());
            f(&format!("{name}.br"), g.br.as_slice_mut().unwrap());
            f(&format!("{name}.bn"), g.bn.as_slice_mut().unwrap());
            f(&format!("{name}.bhn"), g.bhn.as_slice_mut().unwrap());
        };
        visit_conv("front", &mut self.front, f);
        visit_ln("front_ln", &mut self.front_ln, f);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            visit_ln(&format!("block{i}.ln1"), &mut blk.ln1, f);
            visit_conv(&format!("block{i}.conv1"), &mut blk.conv1, f);
            visit_ln(&format!("block{i}.ln2"), &mut blk.ln2, f);
            visit_conv(&format!("block{i}.conv2"), &mut blk.conv2, f);
        }
        for (i, g) in self.grus.iter_mut().enumerate() {
            visit_ln(&format!("gru{i}.ln"), &mut g.ln, f);
            visit_gru(&format!("gru{i}.fwd"), &mut g.fwd, f);
            visit_gru(&format!("gru{i}.bwd"), &mut g.bwd, f);
        }
        visit_ln("head_ln", &mut self.head_ln, f);
        visit_lin("fc1", &mut self.fc1, f);
        visit_lin("fc2", &mut self.fc2, f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, _, data| n += data.len());
        n
    }

    /// SHA-256 over all parameter names, shapes, and bytes.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        self.for_each_param(&mut |name, shape, data| {
            hasher.update(name.as_bytes());
            for &d in shape {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in data {
                hasher.update(v.to_le_bytes());
            }
        });
        format!("{:x}", hasher.finalize())
    }
}

/// Labels-and-lengths view used by the loss functions.
pub fn labels_of_batch(batch: &FeatureBatch) -> (Array2<usize>, Vec<usize>) {
    (batch.label_indices.clone(), batch.label_lengths.clone())
}
