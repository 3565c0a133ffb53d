//! Spectro-temporal token transformer (SpecTTTra) for long-audio synthetic
//! song detection.
//!
//! The crate covers the whole pipeline: mel-spectrogram front end,
//! spectro-temporal tokenizer (and a square-patch ViT baseline), transformer
//! encoder with hand-written gradients, augmentation, AdamW training,
//! detection metrics, an analytical efficiency profiler and manifest-driven
//! datasets including a synthetic toy corpus.

pub mod augment;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod frontend;
pub mod model;
pub mod nn;
pub mod params;
pub mod profiler;
mod real;
pub mod tokenizer;
pub mod training;

pub use augment::AugmentConfig;
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use dataio::{ManifestEntry, Split, ToySpec};
pub use error::{Error, Result};
pub use evaluation::{Label, MetricReport, ScoredExample};
pub use frontend::{AudioBuffer, FrameMode, MelExtractor, MelSpectrogram, SpectrogramConfig};
pub use model::{EncoderConfig, FrontendConfig, ModelConfig, ModelParams};
pub use params::NamedTensors;
pub use profiler::{ProfileReport, TimingProtocol};
pub use real::{DType, Real};
pub use tokenizer::{ClipConfig, PatchConfig, TokenSequence, TokenizerParams, Variant};
pub use training::{TrainConfig, TrainSetup};
