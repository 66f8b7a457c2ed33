//! Non-autoregressive code-switching speech recognition.
//!
//! Mask-CTC with a Pinyin-to-Mandarin decoder, word-embedding label
//! smoothing and projection-matrix regularization, together with the
//! scoring and significance tooling used to compare systems.

pub mod config;
pub mod container;
pub mod data;
pub mod decode;
pub mod embed;
pub mod error;
pub mod loss;
pub mod model;
pub mod score;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use config::RunConfig;
pub use data::{gen_corpus, read_manifest, write_manifest, Manifest, SynthConfig};
pub use decode::{decode_pipeline, measure_rtf, DecodeConfig, Hypothesis};
pub use embed::{EmbeddingSmoother, SimilarityMode, SmoothingConfig, WordEmbedding};
pub use error::{Error, Result};
pub use loss::{LossConfig, LossTerms, MaskedSequence, SmoothingMode, TargetSmoother};
pub use model::{Architecture, EncoderConfig, ModelBundle, ModelConfig};
pub use score::{score_corpus, ErrorReport, Utterance};
pub use tensor::{Array, Graph, Var};
pub use train::{Example, Trainer};
pub use vocab::{build_vocab, tokenize, LangTag, PinyinTable, Vocabulary};
