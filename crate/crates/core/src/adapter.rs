//! TS-to-Text adapter: a two-layer perceptron applied row-wise to project
//! encoder embeddings into the language model's embedding space.

use ndarray::{Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::SeriesEmbedding;
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Params};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdapterConfig {
    pub d_ts: usize,
    pub d_text: usize,
    pub hidden_width: usize,
    pub activation: Activation,
}

impl AdapterConfig {
    /// Hidden width defaults to the output width.
    pub fn new(d_ts: usize, d_text: usize) -> Self {
        AdapterConfig {
            d_ts,
            d_text,
            hidden_width: d_text,
            activation: Activation::Gelu,
        }
    }

    /// Paper-scale widths (TimesFM 1080 into a 5120-wide backbone).
    /// Documented preset only.
    pub fn paper_preset() -> Self {
        AdapterConfig::new(1080, 5120)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_ts == 0 || self.d_text == 0 || self.hidden_width == 0 {
            return Err(Error::config("adapter widths must all be >= 1"));
        }
        Ok(())
    }
}

/// Adapter output: one `d_text`-wide row per input patch.
#[derive(Debug, Clone)]
pub struct AdaptedEmbedding {
    pub matrix: Array2<f64>,
}

pub struct AdapterCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Adapter {
    pub config: AdapterConfig,
    pub lin1: Linear,
    pub lin2: Linear,
}

impl Adapter {
    pub fn new(config: AdapterConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(Adapter {
            lin1: Linear::new(config.d_ts, config.hidden_width, rng),
            lin2: Linear::new(config.hidden_width, config.d_text, rng),
            config,
        })
    }

    pub fn project(&self, emb: &SeriesEmbedding) -> Result<AdaptedEmbedding> {
        let (out, _) = self.project_with_cache(&emb.matrix)?;
        Ok(AdaptedEmbedding { matrix: out })
    }

    pub fn project_with_cache(&self, input: &Array2<f64>) -> Result<(Array2<f64>, AdapterCache)> {
        if input.ncols() != self.config.d_ts {
            return Err(Error::config(format!(
                "adapter expected width {}, got {}",
                self.config.d_ts,
                input.ncols()
            )));
        }
        let pre = self.lin1.forward(input);
        let hidden = pre.mapv(|v| self.config.activation.apply(v));
        let out = self.lin2.forward(&hidden);
        Ok((
            out,
            AdapterCache {
                input: input.clone(),
                pre,
                hidden,
            },
        ))
    }

    /// Backprop; returns the gradient with respect to the adapter input.
    pub fn backward(&self, dy: &Array2<f64>, cache: &AdapterCache, grad: &mut Adapter) -> Array2<f64> {
        let d_hidden = self.lin2.backward(&cache.hidden, dy, &mut grad.lin2);
        let d_pre = &d_hidden * &cache.pre.mapv(|v| self.config.activation.derivative(v));
        self.lin1.backward(&cache.input, &d_pre, &mut grad.lin1)
    }

    pub fn zeros_like(&self) -> Self {
        Adapter {
            config: self.config.clone(),
            lin1: self.lin1.zeros_like(),
            lin2: self.lin2.zeros_like(),
        }
    }
}

impl Params for Adapter {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.lin1.visit(&format!("{prefix}lin1"), f);
        self.lin2.visit(&format!("{prefix}lin2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.lin1.visit_mut(&format!("{prefix}lin1"), f);
        self.lin2.visit_mut(&format!("{prefix}lin2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{load_flat, to_flat, zero_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let adapter = Adapter::new(AdapterConfig::new(64, 128), &mut rng).unwrap();
        let emb = SeriesEmbedding {
            matrix: Array2::from_shape_fn((5, 64), |(i, j)| ((i + j) as f64 * 0.1).sin()),
            num_patches: 5,
        };
        let out = adapter.project(&emb).unwrap();
        assert_eq!(out.matrix.shape(), &[5, 128]);
    }

    #[test]
    fn zero_input_zero_biases_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut adapter = Adapter::new(AdapterConfig::new(8, 12), &mut rng).unwrap();
        zero_params(&mut adapter);
        let emb = SeriesEmbedding {
            matrix: Array2::zeros((3, 8)),
            num_patches: 3,
        };
        let out = adapter.project(&emb).unwrap();
        assert!(out.matrix.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let adapter = Adapter::new(AdapterConfig::new(8, 12), &mut rng).unwrap();
        let emb = SeriesEmbedding {
            matrix: Array2::zeros((3, 9)),
            num_patches: 3,
        };
        assert!(matches!(adapter.project(&emb), Err(Error::Config(_))));
    }

    #[test]
    fn row_independence_under_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let adapter = Adapter::new(AdapterConfig::new(8, 12), &mut rng).unwrap();
        let input = Array2::from_shape_fn((4, 8), |(i, j)| ((i * 5 + j) as f64 * 0.3).cos());
        let (out, _) = adapter.project_with_cache(&input).unwrap();
        let mut swapped = input.clone();
        for j in 0..8 {
            swapped.swap([0, j], [2, j]);
        }
        let (out_swapped, _) = adapter.project_with_cache(&swapped).unwrap();
        assert_eq!(out.row(0), out_swapped.row(2));
        assert_eq!(out.row(2), out_swapped.row(0));
        assert_eq!(out.row(1), out_swapped.row(1));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let adapter = Adapter::new(AdapterConfig::new(8, 6), &mut rng).unwrap();
        let input = Array2::from_shape_fn((2, 8), |(i, j)| ((i * 3 + j) as f64 * 0.21).sin());
        let loss_of = |a: &Adapter| a.project_with_cache(&input).unwrap().0.sum();

        let (out, cache) = adapter.project_with_cache(&input).unwrap();
        let mut grad = adapter.zeros_like();
        let dy = Array2::ones(out.raw_dim());
        adapter.backward(&dy, &cache, &mut grad);

        let flat = to_flat(&adapter);
        let grad_flat = to_flat(&grad);
        let h = 1e-4;
        for idx in (0..flat.len()).step_by(flat.len() / 13) {
            let mut plus = adapter.clone();
            let mut minus = adapter.clone();
            let mut fp = flat.clone();
            fp[idx] += h;
            load_flat(&mut plus, &fp).unwrap();
            fp[idx] -= 2.0 * h;
            load_flat(&mut minus, &fp).unwrap();
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let analytic = grad_flat[idx];
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (numeric - analytic).abs() / denom < 1e-3,
                "param {idx}: numeric {numeric} vs analytic {analytic}"
            );
        }
    }
}
