//! Core library: aligns a frozen time-series patch encoder with a toy
//! decoder language model through a trainable projection adapter, plus the
//! surrounding data synthesis, captioning, diversity-metric, training, and
//! evaluation machinery.

pub mod adapter;
pub mod encoder;
pub mod caption;
pub mod diversity;
pub mod error;
pub mod external;
pub mod plot;
pub mod fusion;
pub mod lm;
pub mod model;
pub mod nn;
pub mod series;
pub mod synth;
pub mod exam;
pub mod tokenizer;

pub use adapter::{AdaptedEmbedding, Adapter, AdapterConfig};
pub use encoder::{EncoderConfig, PatchEncoder, SeriesEmbedding};
pub use error::{Error, Result};
pub use fusion::{render_prompt, splice, FusedInput, PromptTemplate, Segment};
pub use lm::{lm_loss, DecodeMode, DecoderLm, LmConfig};
pub use model::{AlignedModel, ModelConfig, ModelGrads, PreparedExample, TrainableSet};
pub use series::{denormalize, instance_normalize, patch, NormalizedSeries, PatchGrid, TimeSeries};
pub use tokenizer::Tokenizer;
