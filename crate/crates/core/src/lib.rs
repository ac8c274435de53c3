//! Non-parallel speech enhancement with an attention-augmented CycleGAN
//! operating on power-compressed STFT magnitudes.

pub mod attention;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod gradsuite;
pub mod numerics;
pub mod layers;
pub mod losses;
pub mod models;
pub mod signal;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Graph, ParamStore, Tensor, Var};
pub use dataset::{Manifest, ManifestEntry};
pub use evalkit::{Evaluation, MetricReport};
pub use signal::Waveform;
pub use training::{Corpus, Trainer, TrainingConfig, UtteranceAudio};
