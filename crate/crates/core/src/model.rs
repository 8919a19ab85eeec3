//! The assembled model: frozen patch encoder, trainable adapter, and
//! decoder language model, wired together through embedding splicing.
//!
//! `bypass_tsfm` repurposes the adapter to project raw patches directly,
//! skipping the encoder; everything downstream is unchanged.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdaptedEmbedding, Adapter, AdapterCache, AdapterConfig};
use crate::encoder::{EncoderCache, EncoderConfig, PatchEncoder};
use crate::error::{Error, Result};
use crate::fusion::{self, FusedInput};
use crate::lm::{lm_loss_and_grad, DecodeMode, DecoderLm, LmConfig};
use crate::nn::Activation;
use crate::series::{self, PatchGrid, TimeSeries, NORM_EPS};
use crate::tokenizer::Tokenizer;

/// Which components the optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    AdapterLm,
    AdapterLmEncoder,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter_hidden: usize,
    pub adapter_activation: Activation,
    pub d_text: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_ff_width: usize,
    pub max_seq_len: usize,
    pub bypass_tsfm: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn desk_default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::desk_default(),
            adapter_hidden: 128,
            adapter_activation: Activation::Gelu,
            d_text: 128,
            lm_layers: 4,
            lm_heads: 4,
            lm_ff_width: 256,
            max_seq_len: 1024,
            bypass_tsfm: false,
            init_seed: 0,
        }
    }

    /// Smaller variant for ablation sweeps and scaling curves.
    pub fn compact() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                d_ts: 32,
                num_layers: 2,
                num_heads: 4,
                ff_width: 64,
                patch_len: 16,
                max_patches: 64,
            },
            adapter_hidden: 64,
            adapter_activation: Activation::Gelu,
            d_text: 64,
            lm_layers: 3,
            lm_heads: 4,
            lm_ff_width: 128,
            max_seq_len: 512,
            bypass_tsfm: false,
            init_seed: 0,
        }
    }

    fn adapter_config(&self) -> AdapterConfig {
        let d_in = if self.bypass_tsfm {
            self.encoder.patch_len
        } else {
            self.encoder.d_ts
        };
        AdapterConfig {
            d_ts: d_in,
            d_text: self.d_text,
            hidden_width: self.adapter_hidden,
            activation: self.adapter_activation,
        }
    }

    fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            d_text: self.d_text,
            num_layers: self.lm_layers,
            num_heads: self.lm_heads,
            ff_width: self.lm_ff_width,
            vocab_size,
            max_seq_len: self.max_seq_len,
        }
    }
}

/// A (prompt, series, target) triple ready for fusion: text tokenized,
/// series normalized and patched.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub id: String,
    pub token_ids: Vec<u32>,
    pub grids: Vec<PatchGrid>,
    /// Trailing supervised positions (0 for inference prompts).
    pub target_len: usize,
}

/// Gradient shadows for all three components.
pub struct ModelGrads {
    pub encoder: PatchEncoder,
    pub adapter: Adapter,
    pub lm: DecoderLm,
}

impl ModelGrads {
    pub fn zeros_of(model: &AlignedModel) -> Self {
        let mut encoder = model.encoder.zeros_like();
        let mut adapter = model.adapter.zeros_like();
        let mut lm = model.lm.zeros_like();
        crate::nn::zero_params(&mut encoder);
        crate::nn::zero_params(&mut adapter);
        crate::nn::zero_params(&mut lm);
        ModelGrads {
            encoder,
            adapter,
            lm,
        }
    }
}

pub struct AlignedModel {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub encoder: PatchEncoder,
    pub adapter: Adapter,
    pub lm: DecoderLm,
}

impl AlignedModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let tokenizer = Tokenizer::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let encoder = PatchEncoder::new(config.encoder.clone(), &mut rng)?;
        let adapter = Adapter::new(config.adapter_config(), &mut rng)?;
        let lm = DecoderLm::new(config.lm_config(tokenizer.vocab_size()), &mut rng)?;
        Ok(AlignedModel {
            config,
            tokenizer,
            encoder,
            adapter,
            lm,
        })
    }

    pub fn set_frozen(&mut self, flag: bool) {
        self.encoder.set_frozen(flag);
    }

    /// Tokenize prompt/target and patch the series.
    ///
    /// The prompt gains a begin-of-answer token; a supervised target gains
    /// an end-of-text token. Errors carry the example id.
    pub fn prepare(
        &self,
        id: &str,
        prompt: &str,
        series: &[TimeSeries],
        target: Option<&str>,
    ) -> Result<PreparedExample> {
        let attach = |e: Error| match e {
            Error::Data { series_id, reason } => Error::Data {
                series_id,
                reason: format!("(example `{id}`) {reason}"),
            },
            other => Error::config(format!("example `{id}`: {other}")),
        };
        let k = fusion::count_placeholder_pairs(prompt).map_err(attach)?;
        if k != series.len() {
            return Err(Error::PlaceholderMismatch {
                placeholders: k,
                series: series.len(),
            });
        }
        let mut grids = Vec::with_capacity(series.len());
        for s in series {
            let norm = series::instance_normalize(s, NORM_EPS).map_err(attach)?;
            let grid = series::patch(&norm, self.config.encoder.patch_len).map_err(attach)?;
            grids.push(grid);
        }
        let mut token_ids = self.tokenizer.encode(prompt);
        token_ids.push(self.tokenizer.answer_start_id());
        let target_len = match target {
            Some(text) => {
                let mut target_ids = self.tokenizer.encode(text);
                target_ids.push(self.tokenizer.end_of_text_id());
                if target_ids.len() == 1 {
                    return Err(Error::NoSupervisedPositions);
                }
                token_ids.extend_from_slice(&target_ids);
                target_ids.len()
            }
            None => 0,
        };
        Ok(PreparedExample {
            id: id.to_string(),
            token_ids,
            grids,
            target_len,
        })
    }

    /// Project one patch grid into the text embedding space.
    fn project_grid(&self, grid: &PatchGrid) -> Result<(Array2<f64>, Option<EncoderCache>, AdapterCache)> {
        if self.config.bypass_tsfm {
            let raw = Array2::from_shape_vec((grid.num_patches, grid.patch_len), grid.patches.clone())
                .map_err(|e| Error::config(e.to_string()))?;
            let (adapted, cache) = self.adapter.project_with_cache(&raw)?;
            Ok((adapted, None, cache))
        } else {
            let (emb, enc_cache) = self.encoder.encode_with_cache(grid)?;
            let (adapted, cache) = self.adapter.project_with_cache(&emb.matrix)?;
            Ok((adapted, Some(enc_cache), cache))
        }
    }

    /// Build the fused input for an example (no gradients kept).
    pub fn fuse(&self, ex: &PreparedExample) -> Result<FusedInput> {
        let mut adapted = Vec::with_capacity(ex.grids.len());
        for grid in &ex.grids {
            let (m, _, _) = self.project_grid(grid)?;
            adapted.push(AdaptedEmbedding { matrix: m });
        }
        let token_embs = self.lm.embed_tokens(&ex.token_ids)?;
        let mut fused = fusion::splice(
            &token_embs,
            &ex.token_ids,
            &adapted,
            &self.tokenizer,
            self.config.max_seq_len,
        )?;
        if ex.target_len > 0 {
            fusion::supervise_tail(&mut fused, ex.target_len)?;
        }
        Ok(fused)
    }

    /// Loss of one supervised example.
    pub fn example_loss(&self, ex: &PreparedExample) -> Result<f64> {
        let fused = self.fuse(ex)?;
        let logits = self.lm.forward(&fused.embeddings)?;
        let (loss, _) = lm_loss_and_grad(&logits, &fused.target_ids, &fused.loss_mask)?;
        Ok(loss)
    }

    /// Forward + backward for one example, accumulating into `grads`.
    ///
    /// Encoder gradients are computed only when the encoder is unfrozen;
    /// frozen means its gradients are absent by construction.
    pub fn accumulate_example(&self, ex: &PreparedExample, grads: &mut ModelGrads) -> Result<f64> {
        let mut adapted = Vec::with_capacity(ex.grids.len());
        let mut enc_caches = Vec::with_capacity(ex.grids.len());
        let mut ad_caches = Vec::with_capacity(ex.grids.len());
        for grid in &ex.grids {
            let (m, enc_cache, ad_cache) = self.project_grid(grid)?;
            adapted.push(AdaptedEmbedding { matrix: m });
            enc_caches.push(enc_cache);
            ad_caches.push(ad_cache);
        }
        let token_embs = self.lm.embed_tokens(&ex.token_ids)?;
        let mut fused = fusion::splice(
            &token_embs,
            &ex.token_ids,
            &adapted,
            &self.tokenizer,
            self.config.max_seq_len,
        )?;
        fusion::supervise_tail(&mut fused, ex.target_len)?;

        let (logits, lm_cache) = self.lm.forward_with_cache(&fused.embeddings)?;
        let (loss, d_logits) = lm_loss_and_grad(&logits, &fused.target_ids, &fused.loss_mask)?;
        let d_fused = self.lm.backward(&d_logits, &lm_cache, &mut grads.lm);

        // text rows scatter into the embedding table
        self.lm
            .accumulate_embedding_grad(&ex.token_ids, fused.text_rows(), &d_fused, &mut grads.lm);

        // series rows flow back through the adapter (and encoder if unfrozen)
        for (i, ad_cache) in ad_caches.iter().enumerate() {
            let range = fused.series_rows(i).expect("series present in layout");
            let d_block = d_fused.slice(ndarray::s![range, ..]).to_owned();
            let d_enc_out = self.adapter.backward(&d_block, ad_cache, &mut grads.adapter);
            if !self.encoder.is_frozen() {
                if let Some(enc_cache) = &enc_caches[i] {
                    self.encoder.backward(&d_enc_out, enc_cache, &mut grads.encoder);
                }
            }
        }
        Ok(loss)
    }

    /// Greedy/top-k generation for a prompt with series attached.
    pub fn generate(
        &self,
        prompt: &str,
        series: &[TimeSeries],
        max_new: usize,
        mode: DecodeMode,
    ) -> Result<String> {
        let ex = self.prepare("generate", prompt, series, None)?;
        let fused = self.fuse(&ex)?;
        self.lm.generate(&fused.embeddings, &self.tokenizer, max_new, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{param_checksum, to_flat};
    use crate::tokenizer::{TS_CLOSE, TS_OPEN};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_ts: 16,
                num_layers: 1,
                num_heads: 2,
                ff_width: 32,
                patch_len: 8,
                max_patches: 16,
            },
            adapter_hidden: 16,
            adapter_activation: Activation::Gelu,
            d_text: 16,
            lm_layers: 1,
            lm_heads: 2,
            lm_ff_width: 32,
            max_seq_len: 256,
            bypass_tsfm: false,
            init_seed: 7,
        }
    }

    fn sine_series(id: &str, len: usize) -> TimeSeries {
        TimeSeries::new(id, (0..len).map(|i| (i as f64 * 0.31).sin() + 0.02 * i as f64).collect())
    }

    #[test]
    fn training_example_length_law() {
        let model = AlignedModel::new(tiny_config()).unwrap();
        // prompt: 4 chars + pair (2 tokens) + answer-start = 7 tokens
        let prompt = format!("see {TS_OPEN}{TS_CLOSE}");
        let series = [sine_series("s", 24)]; // 3 patches of 8
        let ex = model.prepare("e1", &prompt, &series, Some("ok")).unwrap();
        // target: 2 chars + eot = 3; text tokens M = 7 + 3 = 10
        assert_eq!(ex.token_ids.len(), 10);
        let fused = model.fuse(&ex).unwrap();
        assert_eq!(fused.len(), 10 + 3);
        assert_eq!(fused.answer_span, 13 - 3);
        let mask_count = fused.loss_mask.iter().filter(|&&m| m == 1).count();
        assert_eq!(mask_count, ex.target_len);
        // no series position is supervised
        for (pos, seg) in fused.segment_map.iter().enumerate() {
            if matches!(seg, fusion::Segment::Series { .. }) {
                assert_eq!(fused.loss_mask[pos], 0);
            }
        }
    }

    #[test]
    fn empty_target_is_rejected() {
        let model = AlignedModel::new(tiny_config()).unwrap();
        let prompt = format!("{TS_OPEN}{TS_CLOSE}");
        let series = [sine_series("s", 8)];
        // empty target still carries the eot token, so it is supervised;
        // the truly empty case is target_len == 1 which prepare rejects
        let ex = model.prepare("e", &prompt, &series, Some("")).unwrap_err();
        assert!(matches!(ex, Error::NoSupervisedPositions));
    }

    #[test]
    fn frozen_encoder_gets_no_gradient_but_adapter_does() {
        let model = AlignedModel::new(tiny_config()).unwrap();
        assert!(model.encoder.is_frozen());
        let prompt = format!("q {TS_OPEN}{TS_CLOSE}");
        let series = [sine_series("s", 16)];
        let ex = model.prepare("e2", &prompt, &series, Some("yes")).unwrap();
        let mut grads = ModelGrads::zeros_of(&model);
        let loss = model.accumulate_example(&ex, &mut grads).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert!(to_flat(&grads.encoder).iter().all(|g| *g == 0.0));
        assert!(to_flat(&grads.adapter).iter().any(|g| *g != 0.0));
        assert!(to_flat(&grads.lm).iter().any(|g| *g != 0.0));
    }

    #[test]
    fn unfrozen_encoder_receives_gradient() {
        let mut model = AlignedModel::new(tiny_config()).unwrap();
        model.set_frozen(false);
        let prompt = format!("q {TS_OPEN}{TS_CLOSE}");
        let series = [sine_series("s", 16)];
        let ex = model.prepare("e3", &prompt, &series, Some("no")).unwrap();
        let mut grads = ModelGrads::zeros_of(&model);
        model.accumulate_example(&ex, &mut grads).unwrap();
        assert!(to_flat(&grads.encoder).iter().any(|g| *g != 0.0));
    }

    #[test]
    fn bypass_mode_projects_raw_patches() {
        let mut cfg = tiny_config();
        cfg.bypass_tsfm = true;
        let model = AlignedModel::new(cfg).unwrap();
        assert_eq!(model.adapter.config.d_ts, 8); // patch_len
        let prompt = format!("q {TS_OPEN}{TS_CLOSE}");
        let series = [sine_series("s", 24)];
        let ex = model.prepare("e4", &prompt, &series, Some("ok")).unwrap();
        let fused = model.fuse(&ex).unwrap();
        // length law unchanged under bypass
        assert_eq!(fused.len(), ex.token_ids.len() + 3);
        let mut grads = ModelGrads::zeros_of(&model);
        model.accumulate_example(&ex, &mut grads).unwrap();
        assert!(to_flat(&grads.adapter).iter().any(|g| *g != 0.0));
        assert!(to_flat(&grads.encoder).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn checksum_stable_across_forward_passes() {
        let model = AlignedModel::new(tiny_config()).unwrap();
        let before = param_checksum(&model.encoder);
        let prompt = format!("a {TS_OPEN}{TS_CLOSE}");
        let series = [sine_series("s", 16)];
        let ex = model.prepare("e5", &prompt, &series, Some("x")).unwrap();
        let _ = model.example_loss(&ex).unwrap();
        assert_eq!(param_checksum(&model.encoder), before);
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let mut model = AlignedModel::new(tiny_config()).unwrap();
        model.set_frozen(false);
        let prompt = format!("v {TS_OPEN}{TS_CLOSE}");
        let series = [sine_series("s", 16)];
        let ex = model.prepare("e6", &prompt, &series, Some("hi")).unwrap();

        let mut grads = ModelGrads::zeros_of(&model);
        model.accumulate_example(&ex, &mut grads).unwrap();

        // check a handful of encoder and adapter params end to end
        let flat_enc = to_flat(&model.encoder);
        let genc = to_flat(&grads.encoder);
        let h = 1e-5;
        for idx in (0..flat_enc.len()).step_by(flat_enc.len() / 7) {
            let mut m2 = AlignedModel::new(tiny_config()).unwrap();
            m2.set_frozen(false);
            let mut fp = flat_enc.clone();
            fp[idx] += h;
            crate::nn::load_flat(&mut m2.encoder, &fp).unwrap();
            let lp = m2.example_loss(&ex).unwrap();
            fp[idx] -= 2.0 * h;
            crate::nn::load_flat(&mut m2.encoder, &fp).unwrap();
            let lm_ = m2.example_loss(&ex).unwrap();
            let numeric = (lp - lm_) / (2.0 * h);
            let analytic = genc[idx];
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (numeric - analytic).abs() / denom < 1e-3,
                "encoder param {idx}: numeric {numeric} vs analytic {analytic}"
            );
        }
    }
}
