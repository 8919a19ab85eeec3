//! Transformer building blocks with hand-written forward/backward passes.
//!
//! Everything is `f64` and row-major: activations are `T x d` matrices with
//! one row per position. Gradient structs reuse the parameter struct types;
//! `backward` methods accumulate into them so a batch can share one set.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Visitor over a component's named parameter tensors, in canonical order.
///
/// The canonical order is what defines the flat parameter vector used by
/// the optimizer, finite-difference checks, checksums, and checkpoints.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>));
}

pub fn param_count(p: &impl Params) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, v| n += v.len());
    n
}

pub fn to_flat(p: &impl Params) -> Vec<f64> {
    let mut out = Vec::with_capacity(param_count(p));
    p.visit("", &mut |_, v| out.extend(v.iter().copied()));
    out
}

pub fn load_flat(p: &mut impl Params, src: &[f64]) -> Result<()> {
    let expected = param_count(p);
    if src.len() != expected {
        return Err(Error::Shape {
            component: "flat parameter vector".into(),
            detail: format!("expected {expected} values, got {}", src.len()),
        });
    }
    let mut pos = 0;
    p.visit_mut("", &mut |_, mut v| {
        for slot in v.iter_mut() {
            *slot = src[pos];
            pos += 1;
        }
    });
    Ok(())
}

/// Sets every parameter to zero; used to build gradient shadows.
pub fn zero_params(p: &mut impl Params) {
    p.visit_mut("", &mut |_, mut v| v.fill(0.0));
}

/// One named tensor, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn tensor_entries(p: &impl Params) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    p.visit("", &mut |name, v| {
        out.push(TensorEntry {
            name: name.to_string(),
            shape: v.shape().to_vec(),
            data: v.iter().copied().collect(),
        })
    });
    out
}

pub fn load_tensor_entries(p: &mut impl Params, component: &str, entries: &[TensorEntry]) -> Result<()> {
    let mut idx = 0;
    let mut failure: Option<Error> = None;
    p.visit_mut("", &mut |name, mut v| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = entries.get(idx) else {
            failure = Some(Error::Shape {
                component: component.to_string(),
                detail: format!("missing tensor `{name}`"),
            });
            return;
        };
        if entry.name != name || entry.shape != v.shape() {
            failure = Some(Error::Shape {
                component: component.to_string(),
                detail: format!(
                    "tensor `{}` {:?} does not match expected `{name}` {:?}",
                    entry.name,
                    entry.shape,
                    v.shape()
                ),
            });
            return;
        }
        for (slot, val) in v.iter_mut().zip(entry.data.iter()) {
            *slot = *val;
        }
        idx += 1;
    });
    if let Some(err) = failure {
        return Err(err);
    }
    if idx != entries.len() {
        return Err(Error::Shape {
            component: component.to_string(),
            detail: format!("{} extra tensors in blob", entries.len() - idx),
        });
    }
    Ok(())
}

/// SHA-256 over the little-endian bytes of the flat parameter vector.
pub fn param_checksum(p: &impl Params) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    p.visit("", &mut |_, v| {
        for x in v.iter() {
            hasher.update(x.to_le_bytes());
        }
    });
    hex::encode(hasher.finalize())
}

/// Supported nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                const C: f64 = 0.7978845608028654; // sqrt(2/pi)
                const A: f64 = 0.044715;
                0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
            }
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                const C: f64 = 0.7978845608028654;
                const A: f64 = 0.044715;
                let u = C * (x + A * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Affine map `y = x W + b` with `W: d_in x d_out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let scale = (1.0 / d_in as f64).sqrt();
        Linear::with_scale(d_in, d_out, rng, scale)
    }

    pub fn with_scale(d_in: usize, d_out: usize, rng: &mut impl Rng, scale: f64) -> Self {
        let normal = Normal::new(0.0, scale).expect("valid stddev");
        Linear {
            w: Array2::from_shape_fn((d_in, d_out), |_| normal.sample(rng)),
            b: Array1::zeros(d_out),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            w: Array2::zeros((d_in, d_out)),
            b: Array1::zeros(d_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear::zeros(self.w.nrows(), self.w.ncols())
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients and returns `d loss / d x`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&format!("{prefix}.w"), self.w.view().into_dyn());
        f(&format!("{prefix}.b"), self.b.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&format!("{prefix}.w"), self.w.view_mut().into_dyn());
        f(&format!("{prefix}.b"), self.b.view_mut().into_dyn());
    }
}

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
    pub eps: f64,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
            eps: 1e-5,
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm {
            gain: Array1::zeros(self.gain.len()),
            bias: Array1::zeros(self.bias.len()),
            eps: self.eps,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + self.eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let y = &xhat * &self.gain + &self.bias;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, dy: &Array2<f64>, cache: &LayerNormCache, grad: &mut LayerNorm) -> Array2<f64> {
        let d = dy.ncols() as f64;
        grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let dxhat: Vec<f64> = dy
                .row(i)
                .iter()
                .zip(self.gain.iter())
                .map(|(g, w)| g * w)
                .collect();
            let xhat = cache.xhat.row(i);
            let mean_dxhat = dxhat.iter().sum::<f64>() / d;
            let mean_dxhat_xhat = dxhat.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
            let inv = cache.inv_std[i];
            for j in 0..dy.ncols() {
                dx[[i, j]] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&format!("{prefix}.gain"), self.gain.view().into_dyn());
        f(&format!("{prefix}.bias"), self.bias.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&format!("{prefix}.gain"), self.gain.view_mut().into_dyn());
        f(&format!("{prefix}.bias"), self.bias.view_mut().into_dyn());
    }
}

/// Multi-head scaled dot-product attention over a single sequence.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub num_heads: usize,
    pub causal: bool,
}

pub struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// One `T x T` probability matrix per head.
    pub probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

impl Attention {
    pub fn new(dim: usize, num_heads: usize, causal: bool, rng: &mut impl Rng) -> Result<Self> {
        if dim % num_heads != 0 {
            return Err(Error::config(format!(
                "width {dim} not divisible by {num_heads} heads"
            )));
        }
        Ok(Attention {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
            num_heads,
            causal,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Attention {
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
            num_heads: self.num_heads,
            causal: self.causal,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let t = x.nrows();
        let d = x.ncols();
        let dh = d / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let mut ctx = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(ndarray::s![.., cols.clone()]);
            let kh = k.slice(ndarray::s![.., cols.clone()]);
            let vh = v.slice(ndarray::s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            if self.causal {
                for i in 0..t {
                    for j in (i + 1)..t {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_rows(&mut scores);
            let ctx_h = scores.dot(&vh);
            ctx.slice_mut(ndarray::s![.., cols]).assign(&ctx_h);
            probs.push(scores);
        }
        let y = self.wo.forward(&ctx);
        (y, AttentionCache { q, k, v, probs, ctx })
    }

    pub fn backward(
        &self,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        cache: &AttentionCache,
        grad: &mut Attention,
    ) -> Array2<f64> {
        let d = x.ncols();
        let dh = d / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let d_ctx = self.wo.backward(&cache.ctx, dy, &mut grad.wo);
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.num_heads {
            let cols = h * dh..(h + 1) * dh;
            let probs = &cache.probs[h];
            let d_ctx_h = d_ctx.slice(ndarray::s![.., cols.clone()]);
            let vh = cache.v.slice(ndarray::s![.., cols.clone()]);
            let qh = cache.q.slice(ndarray::s![.., cols.clone()]);
            let kh = cache.k.slice(ndarray::s![.., cols.clone()]);

            dv.slice_mut(ndarray::s![.., cols.clone()])
                .assign(&probs.t().dot(&d_ctx_h));

            let mut d_scores = d_ctx_h.dot(&vh.t());
            // softmax jacobian per row: ds = p * (dp - sum(dp * p))
            for (mut ds_row, p_row) in d_scores.rows_mut().into_iter().zip(probs.rows()) {
                let dot = ds_row.iter().zip(p_row.iter()).map(|(a, b)| a * b).sum::<f64>();
                for (ds, p) in ds_row.iter_mut().zip(p_row.iter()) {
                    *ds = p * (*ds - dot);
                }
            }
            d_scores.mapv_inplace(|s| s * scale);
            dq.slice_mut(ndarray::s![.., cols.clone()])
                .assign(&d_scores.dot(&kh));
            dk.slice_mut(ndarray::s![.., cols])
                .assign(&d_scores.t().dot(&qh));
        }
        let mut dx = self.wq.backward(x, &dq, &mut grad.wq);
        dx += &self.wk.backward(x, &dk, &mut grad.wk);
        dx += &self.wv.backward(x, &dv, &mut grad.wv);
        dx
    }
}

impl Params for Attention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
    }
}

/// Two-layer position-wise feed-forward.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
    pub act: Activation,
}

pub struct FeedForwardCache {
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl FeedForward {
    pub fn new(dim: usize, hidden: usize, act: Activation, rng: &mut impl Rng) -> Self {
        FeedForward {
            w1: Linear::new(dim, hidden, rng),
            w2: Linear::new(hidden, dim, rng),
            act,
        }
    }

    pub fn zeros_like(&self) -> Self {
        FeedForward {
            w1: self.w1.zeros_like(),
            w2: self.w2.zeros_like(),
            act: self.act,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, FeedForwardCache) {
        let pre = self.w1.forward(x);
        let hidden = pre.mapv(|v| self.act.apply(v));
        let y = self.w2.forward(&hidden);
        (y, FeedForwardCache { pre, hidden })
    }

    pub fn backward(
        &self,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        cache: &FeedForwardCache,
        grad: &mut FeedForward,
    ) -> Array2<f64> {
        let d_hidden = self.w2.backward(&cache.hidden, dy, &mut grad.w2);
        let d_pre = &d_hidden * &cache.pre.mapv(|v| self.act.derivative(v));
        self.w1.backward(x, &d_pre, &mut grad.w1)
    }
}

impl Params for FeedForward {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.w1.visit(&format!("{prefix}.w1"), f);
        self.w2.visit(&format!("{prefix}.w2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.w1.visit_mut(&format!("{prefix}.w1"), f);
        self.w2.visit_mut(&format!("{prefix}.w2"), f);
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + ff(ln2(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    normed1: Array2<f64>,
    pub attn: AttentionCache,
    ln2: LayerNormCache,
    normed2: Array2<f64>,
    ff: FeedForwardCache,
}

impl Block {
    pub fn new(dim: usize, num_heads: usize, ff_width: usize, causal: bool, rng: &mut impl Rng) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(dim, num_heads, causal, rng)?,
            ln2: LayerNorm::new(dim),
            ff: FeedForward::new(dim, ff_width, Activation::Gelu, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Block {
            ln1: self.ln1.zeros_like(),
            attn: self.attn.zeros_like(),
            ln2: self.ln2.zeros_like(),
            ff: self.ff.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (normed1, ln1_cache) = self.ln1.forward(x);
        let (attn_out, attn_cache) = self.attn.forward(&normed1);
        let x_mid = x + &attn_out;
        let (normed2, ln2_cache) = self.ln2.forward(&x_mid);
        let (ff_out, ff_cache) = self.ff.forward(&normed2);
        let y = &x_mid + &ff_out;
        let cache = BlockCache {
            ln1: ln1_cache,
            normed1,
            attn: attn_cache,
            ln2: ln2_cache,
            normed2,
            ff: ff_cache,
        };
        (y, cache)
    }

    pub fn backward(&self, dy: &Array2<f64>, cache: &BlockCache, grad: &mut Block) -> Array2<f64> {
        let d_ff = self.ff.backward(&cache.normed2, dy, &cache.ff, &mut grad.ff);
        let mut d_mid = self.ln2.backward(&d_ff, &cache.ln2, &mut grad.ln2);
        d_mid += dy;
        let d_attn = self
            .attn
            .backward(&cache.normed1, &d_mid, &cache.attn, &mut grad.attn);
        let mut dx = self.ln1.backward(&d_attn, &cache.ln1, &mut grad.ln1);
        dx += &d_mid;
        dx
    }
}

impl Params for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ff.visit(&format!("{prefix}.ff"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.ff.visit_mut(&format!("{prefix}.ff"), f);
    }
}

/// Numerically stable softmax applied to each row in place.
pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Fixed sinusoidal positional encoding: `PE[pos, 2k] = sin(pos / 10000^(2k/d))`.
pub fn sinusoidal_encoding(positions: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((positions, dim));
    for pos in 0..positions {
        for k in 0..dim / 2 {
            let rate = (pos as f64) / 10000f64.powf((2 * k) as f64 / dim as f64);
            pe[[pos, 2 * k]] = rate.sin();
            pe[[pos, 2 * k + 1]] = rate.cos();
        }
        if dim % 2 == 1 {
            let k = dim / 2;
            pe[[pos, dim - 1]] = ((pos as f64) / 10000f64.powf((2 * k) as f64 / dim as f64)).sin();
        }
    }
    pe
}

/// Global-norm gradient clipping; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn linear_forward_shape_and_zero() {
        let lin = Linear::zeros(4, 3);
        let x = Array2::from_elem((2, 4), 1.5);
        let y = lin.forward(&x);
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut m = Array2::from_shape_fn((5, 7), |(i, j)| (i as f64) - (j as f64) * 0.3);
        softmax_rows(&mut m);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_encoding_row_zero() {
        let pe = sinusoidal_encoding(3, 8);
        for k in 0..4 {
            assert_eq!(pe[[0, 2 * k]], 0.0);
            assert_eq!(pe[[0, 2 * k + 1]], 1.0);
        }
    }

    #[test]
    fn attention_probs_rows_sum_to_one() {
        let mut r = rng(1);
        let attn = Attention::new(16, 4, true, &mut r).unwrap();
        let x = Array2::from_shape_fn((6, 16), |(i, j)| ((i * 7 + j) as f64 * 0.13).sin());
        let (_, cache) = attn.forward(&x);
        for probs in &cache.probs {
            for row in probs.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn causal_attention_is_lower_triangular() {
        let mut r = rng(2);
        let attn = Attention::new(8, 2, true, &mut r).unwrap();
        let x = Array2::from_shape_fn((5, 8), |(i, j)| ((i + j) as f64 * 0.21).cos());
        let (_, cache) = attn.forward(&x);
        for probs in &cache.probs {
            for i in 0..5 {
                for j in (i + 1)..5 {
                    assert_eq!(probs[[i, j]], 0.0);
                }
            }
        }
    }

    /// Central finite differences against the analytic gradient of a block.
    #[test]
    fn block_gradient_matches_finite_differences() {
        let mut r = rng(3);
        let block = Block::new(8, 2, 16, false, &mut r).unwrap();
        let x = Array2::from_shape_fn((4, 8), |(i, j)| ((i * 3 + j) as f64 * 0.17).sin());

        // loss = sum of outputs weighted by a fixed matrix
        let weights = Array2::from_shape_fn((4, 8), |(i, j)| ((i + 2 * j) as f64 * 0.11).cos());
        let loss_of = |b: &Block| -> f64 {
            let (y, _) = b.forward(&x);
            (&y * &weights).sum()
        };

        let (_, cache) = block.forward(&x);
        let mut grad = block.zeros_like();
        block.backward(&weights, &cache, &mut grad);

        let flat = to_flat(&block);
        let grad_flat = to_flat(&grad);
        let h = 1e-5;
        let mut checked = 0;
        let stride = flat.len() / 17;
        for idx in (0..flat.len()).step_by(stride.max(1)) {
            let mut plus = block.clone();
            let mut minus = block.clone();
            let mut fp = flat.clone();
            fp[idx] += h;
            load_flat(&mut plus, &fp).unwrap();
            fp[idx] -= 2.0 * h;
            load_flat(&mut minus, &fp).unwrap();
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let analytic = grad_flat[idx];
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (numeric - analytic).abs() / denom < 1e-4,
                "param {idx}: numeric {numeric} vs analytic {analytic}"
            );
            checked += 1;
        }
        assert!(checked >= 10);
    }

    #[test]
    fn flat_round_trip_preserves_params() {
        let mut r = rng(4);
        let block = Block::new(8, 2, 16, true, &mut r).unwrap();
        let flat = to_flat(&block);
        let mut copy = block.clone();
        zero_params(&mut copy);
        load_flat(&mut copy, &flat).unwrap();
        assert_eq!(to_flat(&copy), flat);
        assert_eq!(param_checksum(&copy), param_checksum(&block));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![3.0, 4.0];
        let norm = clip_global_norm(&mut g, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);
    }
}
