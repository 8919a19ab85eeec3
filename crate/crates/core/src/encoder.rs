//! Patch encoder: per-patch residual embedding, sinusoidal positions, and a
//! stack of bidirectional pre-norm transformer blocks.
//!
//! This is the frozen feature extractor of the pipeline. The freeze contract
//! lives here as a flag; the training loop consults it to decide whether the
//! encoder participates in the trainable set.

use ndarray::{Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Activation, Block, BlockCache, LayerNorm, LayerNormCache, Linear, Params};
use crate::series::PatchGrid;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub d_ts: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_width: usize,
    pub patch_len: usize,
    pub max_patches: usize,
}

impl EncoderConfig {
    /// Desk-scale default used throughout the tests.
    pub fn desk_default() -> Self {
        EncoderConfig {
            d_ts: 64,
            num_layers: 2,
            num_heads: 4,
            ff_width: 256,
            patch_len: 32,
            max_patches: 64,
        }
    }

    /// Width quoted for the TimesFM-1.0-200M backbone. Documented preset
    /// only; never instantiated in tests.
    pub fn timesfm_200m_preset() -> Self {
        EncoderConfig {
            d_ts: 1080,
            num_layers: 20,
            num_heads: 16,
            ff_width: 1280,
            patch_len: 32,
            max_patches: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_ts == 0
            || self.num_layers == 0
            || self.num_heads == 0
            || self.ff_width == 0
            || self.patch_len == 0
            || self.max_patches == 0
        {
            return Err(Error::config("encoder config counts must all be >= 1"));
        }
        if self.d_ts % self.num_heads != 0 {
            return Err(Error::config(format!(
                "d_ts {} not divisible by num_heads {}",
                self.d_ts, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Encoder output: one row per input patch.
#[derive(Debug, Clone)]
pub struct SeriesEmbedding {
    pub matrix: Array2<f64>,
    pub num_patches: usize,
}

pub struct EncoderCache {
    patches: Array2<f64>,
    embed_pre: Array2<f64>,
    embed_hidden: Array2<f64>,
    pub blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
}

#[derive(Debug, Clone)]
pub struct PatchEncoder {
    pub config: EncoderConfig,
    /// Residual patch embedding: `w2(act(w1 p)) + skip(p)`.
    pub embed_in: Linear,
    pub embed_out: Linear,
    pub embed_skip: Linear,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    act: Activation,
    frozen: bool,
}

impl PatchEncoder {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            blocks.push(Block::new(
                config.d_ts,
                config.num_heads,
                config.ff_width,
                false,
                rng,
            )?);
        }
        Ok(PatchEncoder {
            embed_in: Linear::new(config.patch_len, config.d_ts, rng),
            embed_out: Linear::new(config.d_ts, config.d_ts, rng),
            embed_skip: Linear::new(config.patch_len, config.d_ts, rng),
            blocks,
            final_ln: LayerNorm::new(config.d_ts),
            act: Activation::Gelu,
            frozen: true,
            config,
        })
    }

    pub fn set_frozen(&mut self, flag: bool) {
        self.frozen = flag;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn grid_to_matrix(&self, grid: &PatchGrid) -> Result<Array2<f64>> {
        if grid.patch_len != self.config.patch_len {
            return Err(Error::config(format!(
                "grid patch length {} does not match encoder patch length {}",
                grid.patch_len, self.config.patch_len
            )));
        }
        Array2::from_shape_vec((grid.num_patches, grid.patch_len), grid.patches.clone())
            .map_err(|e| Error::config(e.to_string()))
    }

    /// Residual-block embedding of each patch plus its positional encoding.
    pub fn embed_patch_tokens(&self, grid: &PatchGrid) -> Result<Array2<f64>> {
        let patches = self.grid_to_matrix(grid)?;
        let (tokens, _, _) = self.embed_forward(&patches);
        Ok(tokens)
    }

    fn embed_forward(&self, patches: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let pre = self.embed_in.forward(patches);
        let hidden = pre.mapv(|v| self.act.apply(v));
        let mut tokens = self.embed_out.forward(&hidden) + self.embed_skip.forward(patches);
        tokens += &nn::sinusoidal_encoding(patches.nrows(), self.config.d_ts);
        (tokens, pre, hidden)
    }

    /// Full encode: patch embedding followed by the transformer stack.
    pub fn encode(&self, grid: &PatchGrid) -> Result<SeriesEmbedding> {
        let (emb, _) = self.encode_with_cache(grid)?;
        Ok(emb)
    }

    pub fn encode_with_cache(&self, grid: &PatchGrid) -> Result<(SeriesEmbedding, EncoderCache)> {
        if grid.num_patches > self.config.max_patches {
            return Err(Error::Overlength {
                actual: grid.num_patches,
                max: self.config.max_patches,
            });
        }
        let patches = self.grid_to_matrix(grid)?;
        let (tokens, embed_pre, embed_hidden) = self.embed_forward(&patches);
        let mut x = tokens;
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&x);
            block_caches.push(cache);
            x = next;
        }
        let (out, final_ln) = self.final_ln.forward(&x);
        Ok((
            SeriesEmbedding {
                num_patches: out.nrows(),
                matrix: out,
            },
            EncoderCache {
                patches,
                embed_pre,
                embed_hidden,
                blocks: block_caches,
                final_ln,
            },
        ))
    }

    /// Backprop through the encoder, accumulating parameter gradients.
    pub fn backward(&self, d_out: &Array2<f64>, cache: &EncoderCache, grad: &mut PatchEncoder) {
        let mut dx = self.final_ln.backward(d_out, &cache.final_ln, &mut grad.final_ln);
        for (block, bcache) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            let gblock = &mut grad.blocks[grad_index(&self.blocks, block)];
            dx = block.backward(&dx, bcache, gblock);
        }
        // positional encoding is constant; gradient flows to the three embed maps
        let d_hidden = self.embed_out.backward(&cache.embed_hidden, &dx, &mut grad.embed_out);
        let d_pre = &d_hidden * &cache.embed_pre.mapv(|v| self.act.derivative(v));
        self.embed_in.backward(&cache.patches, &d_pre, &mut grad.embed_in);
        self.embed_skip.backward(&cache.patches, &dx, &mut grad.embed_skip);
    }

    pub fn zeros_like(&self) -> Self {
        PatchEncoder {
            config: self.config.clone(),
            embed_in: self.embed_in.zeros_like(),
            embed_out: self.embed_out.zeros_like(),
            embed_skip: self.embed_skip.zeros_like(),
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            final_ln: self.final_ln.zeros_like(),
            act: self.act,
            frozen: self.frozen,
        }
    }
}

fn grad_index(blocks: &[Block], block: &Block) -> usize {
    blocks
        .iter()
        .position(|b| std::ptr::eq(b, block))
        .expect("block belongs to this encoder")
}

impl Params for PatchEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.embed_in.visit(&format!("{prefix}embed_in"), f);
        self.embed_out.visit(&format!("{prefix}embed_out"), f);
        self.embed_skip.visit(&format!("{prefix}embed_skip"), f);
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("{prefix}blocks.{i}"), f);
        }
        self.final_ln.visit(&format!("{prefix}final_ln"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.embed_in.visit_mut(&format!("{prefix}embed_in"), f);
        self.embed_out.visit_mut(&format!("{prefix}embed_out"), f);
        self.embed_skip.visit_mut(&format!("{prefix}embed_skip"), f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&format!("{prefix}blocks.{i}"), f);
        }
        self.final_ln.visit_mut(&format!("{prefix}final_ln"), f);
    }
}
