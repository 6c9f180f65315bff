//! Neural layers with explicit forward and backward passes over f64 tensors.
//!
//! Activations are `[batch, channels, time]` throughout. Every layer returns
//! whatever cache its backward pass needs; gradients are accumulated into a
//! mirror struct of the same parameter types.

use ndarray::{s, Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// 1-D convolution over the time axis.
#[derive(Debug, Clone)]
pub struct Conv1d {
    /// `[out_channels, in_channels, kernel]`
    pub w: Array3<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        Conv1d {
            w: Array3::from_shape_fn((out_ch, in_ch, kernel), |_| rng.gen_range(-bound..bound)),
            b: Array1::from_shape_fn(out_ch, |_| rng.gen_range(-bound..bound)),
            stride,
            pad,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv1d {
            w: Array3::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn out_len(&self, t: usize) -> usize {
        let k = self.w.dim().2;
        (t + 2 * self.pad).saturating_sub(k) / self.stride + 1
    }

    fn im2col(&self, x: &Array3<f64>) -> (Array2<f64>, usize) {
        let (b, cin, t) = x.dim();
        let k = self.w.dim().2;
        let t_out = self.out_len(t);
        let mut col = Array2::zeros((b * t_out, cin * k));
        for bi in 0..b {
            for to in 0..t_out {
                let row = bi * t_out + to;
                for ci in 0..cin {
                    for ki in 0..k {
                        let ti = (to * self.stride + ki) as isize - self.pad as isize;
                        if ti >= 0 && (ti as usize) < t {
                            col[[row, ci * k + ki]] = x[[bi, ci, ti as usize]];
                        }
                    }
                }
            }
        }
        (col, t_out)
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (b, _, _) = x.dim();
        let (cout, cin, k) = self.w.dim();
        let (col, t_out) = self.im2col(x);
        let wmat = self.w.view().into_shape_with_order((cout, cin * k)).unwrap();
        let ymat = col.dot(&wmat.t()); // [b*t_out, cout]
        let mut y = Array3::zeros((b, cout, t_out));
        for bi in 0..b {
            for to in 0..t_out {
                for co in 0..cout {
                    y[[bi, co, to]] = ymat[[bi * t_out + to, co]] + self.b[co];
                }
            }
        }
        y
    }

    /// Returns the input gradient and accumulates parameter gradients.
    pub fn backward(&self, x: &Array3<f64>, dy: &Array3<f64>, grad: &mut Conv1d) -> Array3<f64> {
        let (b, cin, t) = x.dim();
        let (cout, _, k) = self.w.dim();
        let (col, t_out) = self.im2col(x);
        let mut dymat = Array2::zeros((b * t_out, cout));
        for bi in 0..b {
            for to in 0..t_out {
                for co in 0..cout {
                    dymat[[bi * t_out + to, co]] = dy[[bi, co, to]];
                    grad.b[co] += dy[[bi, co, to]];
                }
            }
        }
        let dwmat = dymat.t().dot(&col); // [cout, cin*k]
        let gw = grad.w.view_mut().into_shape_with_order((cout, cin * k)).unwrap();
        let mut gw = gw;
        gw += &dwmat;
        let wmat = self.w.view().into_shape_with_order((cout, cin * k)).unwrap();
        let dcol = dymat.dot(&wmat); // [b*t_out, cin*k]
        let mut dx = Array3::zeros((b, cin, t));
        for bi in 0..b {
            for to in 0..t_out {
                let row = bi * t_out + to;
                for ci in 0..cin {
                    for ki in 0..k {
                        let ti = (to * self.stride + ki) as isize - self.pad as isize;
                        if ti >= 0 && (ti as usize) < t {
                            dx[[bi, ci, ti as usize]] += dcol[[row, ci * k + ki]];
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Layer normalization over the channel dimension at each (batch, time)
/// position.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug)]
pub struct LayerNormCache {
    xhat: Array3<f64>,
    inv_std: Array2<f64>, // [batch, time]
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(channels: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, LayerNormCache) {
        let (b, c, t) = x.dim();
        let mut xhat = Array3::zeros((b, c, t));
        let mut inv_std = Array2::zeros((b, t));
        let mut y = Array3::zeros((b, c, t));
        for bi in 0..b {
            for ti in 0..t {
                let col = x.slice(s![bi, .., ti]);
                let mean = col.sum() / c as f64;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let istd = 1.0 / (var + LN_EPS).sqrt();
                inv_std[[bi, ti]] = istd;
                for ci in 0..c {
                    let xh = (x[[bi, ci, ti]] - mean) * istd;
                    xhat[[bi, ci, ti]] = xh;
                    y[[bi, ci, ti]] = self.gamma[ci] * xh + self.beta[ci];
                }
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array3<f64>, grad: &mut LayerNorm) -> Array3<f64> {
        let (b, c, t) = dy.dim();
        let mut dx = Array3::zeros((b, c, t));
        for bi in 0..b {
            for ti in 0..t {
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for ci in 0..c {
                    let d = dy[[bi, ci, ti]];
                    let xh = cache.xhat[[bi, ci, ti]];
                    grad.gamma[ci] += d * xh;
                    grad.beta[ci] += d;
                    let dxhat = d * self.gamma[ci];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xh;
                }
                let istd = cache.inv_std[[bi, ti]];
                let n = c as f64;
                for ci in 0..c {
                    let dxhat = dy[[bi, ci, ti]] * self.gamma[ci];
                    let xh = cache.xhat[[bi, ci, ti]];
                    dx[[bi, ci, ti]] =
                        istd * (dxhat - sum_dxhat / n - xh * sum_dxhat_xhat / n);
                }
            }
        }
        dx
    }
}

/// Fully connected layer applied independently at every time step.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `[out, in]`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            w: Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-bound..bound)),
            b: Array1::from_shape_fn(out_dim, |_| rng.gen_range(-bound..bound)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (b, cin, t) = x.dim();
        let cout = self.w.dim().0;
        let mut y = Array3::zeros((b, cout, t));
        for bi in 0..b {
            let xt = x.slice(s![bi, .., ..]); // [cin, t]
            let yt = self.w.dot(&xt); // [cout, t]
            for co in 0..cout {
                for ti in 0..t {
                    y[[bi, co, ti]] = yt[[co, ti]] + self.b[co];
                }
            }
        }
        let _ = cin;
        y
    }

    pub fn backward(&self, x: &Array3<f64>, dy: &Array3<f64>, grad: &mut Linear) -> Array3<f64> {
        let (b, cin, t) = x.dim();
        let mut dx = Array3::zeros((b, cin, t));
        for bi in 0..b {
            let xt = x.slice(s![bi, .., ..]); // [cin, t]
            let dyt = dy.slice(s![bi, .., ..]); // [cout, t]
            grad.w += &dyt.dot(&xt.t());
            for co in 0..self.w.dim().0 {
                grad.b[co] += dyt.row(co).sum();
            }
            dx.slice_mut(s![bi, .., ..]).assign(&self.w.t().dot(&dyt));
        }
        dx
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One direction of a GRU layer.
///
/// Update equations (per step, vectors over the hidden dim):
///   z = σ(Wz x + Uz h + bz)
///   r = σ(Wr x + Ur h + br)
///   n = tanh(Wn x + bn + r ∘ (Un h + bhn))
///   h' = (1 − z) ∘ n + z ∘ h
#[derive(Debug, Clone)]
pub struct GruDir {
    pub wz: Array2<f64>,
    pub wr: Array2<f64>,
    pub wn: Array2<f64>,
    pub uz: Array2<f64>,
    pub ur: Array2<f64>,
    pub un: Array2<f64>,
    pub bz: Array1<f64>,
    pub br: Array1<f64>,
    pub bn: Array1<f64>,
    pub bhn: Array1<f64>,
}

#[derive(Debug)]
pub struct GruCache {
    pub z: Array3<f64>,
    pub r: Array3<f64>,
    pub n: Array3<f64>,
    pub hun: Array3<f64>,    // Un h + bhn before the reset gate
    pub h_prev: Array3<f64>, // hidden state entering each step
    pub h: Array3<f64>,      // hidden state sequence (output)
}

impl GruDir {
    pub fn new(in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bi = 1.0 / (in_dim as f64).sqrt();
        let bh = 1.0 / (hidden as f64).sqrt();
        let mk_i = |rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((hidden, in_dim), |_| rng.gen_range(-bi..bi))
        };
        let mk_h = |rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((hidden, hidden), |_| rng.gen_range(-bh..bh))
        };
        let mk_b = |rng: &mut ChaCha8Rng| Array1::from_shape_fn(hidden, |_| rng.gen_range(-bh..bh));
        GruDir {
            wz: mk_i(rng),
            wr: mk_i(rng),
            wn: mk_i(rng),
            uz: mk_h(rng),
            ur: mk_h(rng),
            un: mk_h(rng),
            bz: mk_b(rng),
            br: mk_b(rng),
            bn: mk_b(rng),
            bhn: mk_b(rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        GruDir {
            wz: Array2::zeros(self.wz.raw_dim()),
            wr: Array2::zeros(self.wr.raw_dim()),
            wn: Array2::zeros(self.wn.raw_dim()),
            uz: Array2::zeros(self.uz.raw_dim()),
            ur: Array2::zeros(self.ur.raw_dim()),
            un: Array2::zeros(self.un.raw_dim()),
            bz: Array1::zeros(self.bz.raw_dim()),
            br: Array1::zeros(self.br.raw_dim()),
            bn: Array1::zeros(self.bn.raw_dim()),
            bhn: Array1::zeros(self.bhn.raw_dim()),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wz.dim().0
    }

    pub fn forward(&self, x: &Array3<f64>) -> GruCache {
        let (b, _, t) = x.dim();
        let h_dim = self.hidden();
        let mut cache = GruCache {
            z: Array3::zeros((b, h_dim, t)),
            r: Array3::zeros((b, h_dim, t)),
            n: Array3::zeros((b, h_dim, t)),
            hun: Array3::zeros((b, h_dim, t)),
            h_prev: Array3::zeros((b, h_dim, t)),
            h: Array3::zeros((b, h_dim, t)),
        };
        let mut h = Array2::zeros((b, h_dim));
        for ti in 0..t {
            let xt = x.slice(s![.., .., ti]); // [b, in]
            let az = xt.dot(&self.wz.t()) + h.dot(&self.uz.t()) + &self.bz;
            let ar = xt.dot(&self.wr.t()) + h.dot(&self.ur.t()) + &self.br;
            let hun = h.dot(&self.un.t()) + &self.bhn;
            let z = az.mapv(sigmoid);
            let r = ar.mapv(sigmoid);
            let an = xt.dot(&self.wn.t()) + &self.bn + &(&r * &hun);
            let n = an.mapv(f64::tanh);
            cache.h_prev.slice_mut(s![.., .., ti]).assign(&h);
            let h_new = (1.0 - &z) * &n + &z * &h;
            cache.z.slice_mut(s![.., .., ti]).assign(&z);
            cache.r.slice_mut(s![.., .., ti]).assign(&r);
            cache.n.slice_mut(s![.., .., ti]).assign(&n);
            cache.hun.slice_mut(s![.., .., ti]).assign(&hun);
            cache.h.slice_mut(s![.., .., ti]).assign(&h_new);
            h = h_new;
        }
        cache
    }

    pub fn backward(
        &self,
        x: &Array3<f64>,
        cache: &GruCache,
        dh_seq: &Array3<f64>,
        grad: &mut GruDir,
    ) -> Array3<f64> {
        let (b, in_dim, t) = x.dim();
        let h_dim = self.hidden();
        let mut dx = Array3::zeros((b, in_dim, t));
        let mut dh = Array2::zeros((b, h_dim));
        for ti in (0..t).rev() {
            dh += &dh_seq.slice(s![.., .., ti]);
            let z = cache.z.slice(s![.., .., ti]);
            let r = cache.r.slice(s![.., .., ti]);
            let n = cache.n.slice(s![.., .., ti]);
            let hun = cache.hun.slice(s![.., .., ti]);
            let h_prev = cache.h_prev.slice(s![.., .., ti]);
            let xt = x.slice(s![.., .., ti]);

            let dz = &dh * &(&h_prev.to_owned() - &n); // [b, h]
            let dn = &dh * &(1.0 - &z);
            let mut dh_next = (&dh * &z).to_owned();

            let dan = &dn * &n.mapv(|v| 1.0 - v * v);
            let dr = &dan * &hun;
            let dhun = &dan * &r;
            let daz = &dz * &z.mapv(|v| v * (1.0 - v));
            let dar = &dr * &r.mapv(|v| v * (1.0 - v));

            grad.wn += &dan.t().dot(&xt);
            grad.wz += &daz.t().dot(&xt);
            grad.wr += &dar.t().dot(&xt);
            grad.un += &dhun.t().dot(&h_prev);
            grad.uz += &daz.t().dot(&h_prev);
            grad.ur += &dar.t().dot(&h_prev);
            for bi in 0..b {
                for hi in 0..h_dim {
                    grad.bn[hi] += dan[[bi, hi]];
                    grad.bhn[hi] += dhun[[bi, hi]];
                    grad.bz[hi] += daz[[bi, hi]];
                    grad.br[hi] += dar[[bi, hi]];
                }
            }
            dh_next += &dhun.dot(&self.un);
            dh_next += &daz.dot(&self.uz);
            dh_next += &dar.dot(&self.ur);

            let dxt = dan.dot(&self.wn) + daz.dot(&self.wz) + dar.dot(&self.wr);
            dx.slice_mut(s![.., .., ti]).assign(&dxt);
            dh = dh_next;
        }
        dx
    }
}

/// Reverse each example's time axis within its valid length; padding frames
/// are zeroed.
pub fn reverse_time(x: &Array3<f64>, lengths: &[usize]) -> Array3<f64> {
    let (b, c, t) = x.dim();
    let mut y = Array3::zeros((b, c, t));
    for bi in 0..b {
        let len = lengths[bi].min(t);
        for ti in 0..len {
            for ci in 0..c {
                y[[bi, ci, ti]] = x[[bi, ci, len - 1 - ti]];
            }
        }
    }
    y
}

/// Zero activations beyond each example's valid length, in place.
pub fn mask_time(x: &mut Array3<f64>, lengths: &[usize]) {
    let (b, _, t) = x.dim();
    for bi in 0..b {
        let len = lengths[bi].min(t);
        if len < t {
            x.slice_mut(s![bi, .., len..]).fill(0.0);
        }
    }
}

pub fn relu(x: &Array3<f64>) -> (Array3<f64>, Array3<f64>) {
    let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    (x * &mask, mask)
}

/// Inverted dropout; returns output and the scaled keep-mask.
pub fn dropout(x: &Array3<f64>, p: f64, rng: &mut ChaCha8Rng) -> (Array3<f64>, Array3<f64>) {
    if p <= 0.0 {
        return (x.clone(), Array3::ones(x.raw_dim()));
    }
    let scale = 1.0 / (1.0 - p);
    let mask = Array3::from_shape_fn(x.dim(), |_| {
        if rng.gen::<f64>() < p {
            0.0
        } else {
            scale
        }
    });
    (x * &mask, mask)
}
