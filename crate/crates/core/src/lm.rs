//! Toy decoder-only language model: token embedding table, causal pre-norm
//! transformer, output head, masked next-token loss, and generation.
//!
//! `forward` consumes an already-fused embedding matrix (text rows and
//! spliced series rows alike); positions are assigned over that fused
//! sequence, so series rows consume positions like ordinary tokens.

use ndarray::{Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Block, BlockCache, LayerNorm, LayerNormCache, Linear, Params};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LmConfig {
    pub d_text: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_width: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl LmConfig {
    pub fn desk_default(vocab_size: usize) -> Self {
        LmConfig {
            d_text: 128,
            num_layers: 4,
            num_heads: 4,
            ff_width: 256,
            vocab_size,
            max_seq_len: 1024,
        }
    }

    /// Backbone width quoted for the 7B instruct model. Documented preset
    /// only; never instantiated in tests.
    pub fn qwen_7b_preset() -> Self {
        LmConfig {
            d_text: 5120,
            num_layers: 28,
            num_heads: 40,
            ff_width: 4 * 5120,
            vocab_size: 152_064,
            max_seq_len: 32_768,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_text % self.num_heads != 0 {
            return Err(Error::config(format!(
                "d_text {} not divisible by num_heads {}",
                self.d_text, self.num_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.num_layers == 0 {
            return Err(Error::config("lm config counts must all be >= 1"));
        }
        Ok(())
    }
}

/// How `generate` picks the next token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    TopK { k: usize, seed: u64 },
}

pub struct LmCache {
    x0: Array2<f64>,
    pub blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    h_final: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct DecoderLm {
    pub config: LmConfig,
    /// `vocab_size x d_text` lookup table.
    pub embedding: Array2<f64>,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    pub head: Linear,
}

impl DecoderLm {
    pub fn new(config: LmConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, (1.0 / config.d_text as f64).sqrt()).expect("valid stddev");
        let embedding =
            Array2::from_shape_fn((config.vocab_size, config.d_text), |_| normal.sample(rng));
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            blocks.push(Block::new(
                config.d_text,
                config.num_heads,
                config.ff_width,
                true,
                rng,
            )?);
        }
        // near-zero head keeps the initial loss at ln(vocab_size)
        let head = Linear::with_scale(config.d_text, config.vocab_size, rng, 1e-4);
        Ok(DecoderLm {
            embedding,
            blocks,
            final_ln: LayerNorm::new(config.d_text),
            head,
            config,
        })
    }

    /// Embedding-table lookup, one row per id.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.config.d_text));
        for (row, &id) in ids.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(Error::config(format!(
                    "internal: token id {id} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            out.row_mut(row).assign(&self.embedding.row(id as usize));
        }
        Ok(out)
    }

    /// Forward over a fused embedding matrix; returns per-position logits.
    pub fn forward(&self, fused: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_with_cache(fused)?.0)
    }

    pub fn forward_with_cache(&self, fused: &Array2<f64>) -> Result<(Array2<f64>, LmCache)> {
        let t = fused.nrows();
        if t > self.config.max_seq_len {
            return Err(Error::Overlength {
                actual: t,
                max: self.config.max_seq_len,
            });
        }
        if fused.ncols() != self.config.d_text {
            return Err(Error::config(format!(
                "fused width {} does not match d_text {}",
                fused.ncols(),
                self.config.d_text
            )));
        }
        let x0 = fused + &nn::sinusoidal_encoding(t, self.config.d_text);
        let mut x = x0.clone();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&x);
            block_caches.push(cache);
            x = next;
        }
        let (h_final, final_ln) = self.final_ln.forward(&x);
        let logits = self.head.forward(&h_final);
        Ok((
            logits,
            LmCache {
                x0,
                blocks: block_caches,
                final_ln,
                h_final,
            },
        ))
    }

    /// Backprop from logit gradients down to the fused input matrix.
    pub fn backward(&self, d_logits: &Array2<f64>, cache: &LmCache, grad: &mut DecoderLm) -> Array2<f64> {
        let d_h = self.head.backward(&cache.h_final, d_logits, &mut grad.head);
        let mut dx = {
            // recover the pre-head activation gradient through the final norm
            self.final_ln.backward(&d_h, &cache.final_ln, &mut grad.final_ln)
        };
        for (i, block) in self.blocks.iter().enumerate().rev() {
            dx = block.backward(&dx, &cache.blocks[i], &mut grad.blocks[i]);
        }
        let _ = &cache.x0; // PE is additive, so d input = d x0
        dx
    }

    /// Scatter text-position gradients into the embedding table.
    pub fn accumulate_embedding_grad(
        &self,
        ids: &[u32],
        rows: impl Iterator<Item = (usize, usize)>,
        d_fused: &Array2<f64>,
        grad: &mut DecoderLm,
    ) {
        for (fused_row, id_index) in rows {
            let id = ids[id_index] as usize;
            let mut g = grad.embedding.row_mut(id);
            g += &d_fused.row(fused_row);
        }
    }

    /// Autoregressive decoding appended after the fused prefix.
    pub fn generate(
        &self,
        prefix: &Array2<f64>,
        tokenizer: &Tokenizer,
        max_new: usize,
        mode: DecodeMode,
    ) -> Result<String> {
        let mut fused = prefix.clone();
        let mut ids: Vec<u32> = Vec::new();
        let mut rng = match mode {
            DecodeMode::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            DecodeMode::Greedy => None,
        };
        for _ in 0..max_new {
            if fused.nrows() >= self.config.max_seq_len {
                break;
            }
            let logits = self.forward(&fused)?;
            let last = logits.row(logits.nrows() - 1);
            let next = match mode {
                DecodeMode::Greedy => {
                    let mut best = 0usize;
                    let mut best_v = f64::NEG_INFINITY;
                    for (i, &v) in last.iter().enumerate() {
                        if v > best_v {
                            best_v = v;
                            best = i;
                        }
                    }
                    best as u32
                }
                DecodeMode::TopK { k, .. } => {
                    let mut indexed: Vec<(usize, f64)> =
                        last.iter().cloned().enumerate().collect();
                    indexed.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite logits"));
                    indexed.truncate(k.max(1));
                    let max = indexed[0].1;
                    let weights: Vec<f64> = indexed.iter().map(|(_, v)| (v - max).exp()).collect();
                    let total: f64 = weights.iter().sum();
                    let mut dart = rng.as_mut().expect("rng set for top-k").gen::<f64>() * total;
                    let mut pick = indexed[0].0;
                    for ((idx, _), w) in indexed.iter().zip(weights.iter()) {
                        dart -= w;
                        if dart <= 0.0 {
                            pick = *idx;
                            break;
                        }
                    }
                    pick as u32
                }
            };
            if next == tokenizer.end_of_text_id() {
                break;
            }
            ids.push(next);
            let emb = self.embed_tokens(&[next])?;
            let mut grown = Array2::zeros((fused.nrows() + 1, self.config.d_text));
            grown
                .slice_mut(ndarray::s![..fused.nrows(), ..])
                .assign(&fused);
            grown.row_mut(fused.nrows()).assign(&emb.row(0));
            fused = grown;
        }
        Ok(tokenizer.decode(&ids))
    }

    pub fn zeros_like(&self) -> Self {
        DecoderLm {
            config: self.config.clone(),
            embedding: Array2::zeros(self.embedding.raw_dim()),
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            final_ln: self.final_ln.zeros_like(),
            head: self.head.zeros_like(),
        }
    }
}

impl Params for DecoderLm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&format!("{prefix}embedding"), self.embedding.view().into_dyn());
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("{prefix}blocks.{i}"), f);
        }
        self.final_ln.visit(&format!("{prefix}final_ln"), f);
        self.head.visit(&format!("{prefix}head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&format!("{prefix}embedding"), self.embedding.view_mut().into_dyn());
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&format!("{prefix}blocks.{i}"), f);
        }
        self.final_ln.visit_mut(&format!("{prefix}final_ln"), f);
        self.head.visit_mut(&format!("{prefix}head"), f);
    }
}

/// Masked next-token cross-entropy.
///
/// A position `t` with `loss_mask[t] = 1` is a supervised target: the
/// logits at `t - 1` are scored against `target_ids[t]`. The result is the
/// mean over supervised positions.
pub fn lm_loss(logits: &Array2<f64>, target_ids: &[u32], loss_mask: &[u8]) -> Result<f64> {
    Ok(lm_loss_and_grad(logits, target_ids, loss_mask)?.0)
}

/// Loss plus the gradient with respect to the logits.
pub fn lm_loss_and_grad(
    logits: &Array2<f64>,
    target_ids: &[u32],
    loss_mask: &[u8],
) -> Result<(f64, Array2<f64>)> {
    let t = logits.nrows();
    if target_ids.len() != t || loss_mask.len() != t {
        return Err(Error::config(format!(
            "loss alignment: logits {t}, targets {}, mask {}",
            target_ids.len(),
            loss_mask.len()
        )));
    }
    let n_masked = loss_mask.iter().filter(|&&m| m == 1).count();
    if n_masked == 0 {
        return Err(Error::NoSupervisedPositions);
    }
    if loss_mask[0] == 1 {
        return Err(Error::config("position 0 has no preceding logit to supervise"));
    }
    let vocab = logits.ncols();
    let mut loss = 0.0;
    let mut d_logits = Array2::zeros(logits.raw_dim());
    let inv_n = 1.0 / n_masked as f64;
    for pos in 0..t {
        if loss_mask[pos] != 1 {
            continue;
        }
        let target = target_ids[pos] as usize;
        if target >= vocab {
            return Err(Error::config(format!(
                "internal: target id {target} outside vocabulary of {vocab}"
            )));
        }
        let row = logits.row(pos - 1);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row.iter() {
            sum += (v - max).exp();
        }
        let log_z = max + sum.ln();
        loss += (log_z - row[target]) * inv_n;
        let mut d_row = d_logits.row_mut(pos - 1);
        for (j, &v) in row.iter().enumerate() {
            d_row[j] += ((v - log_z).exp() - if j == target { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((loss, d_logits))
}

/// Fraction of embedding-table rows that received any gradient.
pub fn embedding_rows_touched(grad: &DecoderLm) -> usize {
    grad.embedding
        .axis_iter(Axis(0))
        .filter(|row| row.iter().any(|v| *v != 0.0))
        .count()
}
