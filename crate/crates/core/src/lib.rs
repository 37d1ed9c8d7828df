//! Speaker-conditioned single-channel speech separation.
//!
//! The pipeline: 16 kHz audio ([`audio`]) is turned into 201-bin
//! log-magnitude spectrograms ([`dsp`]); two residual speaker-embedding
//! networks summarize clean context recordings and a conditioned residual
//! separation network estimates the target frame at the center of a
//! mixture segment ([`model`], built on the [`nn`] engine). [`datagen`]
//! draws training examples and frozen evaluation pairs, and [`metrics`]
//! scores separated audio with BSSEval SDR/SIR/SAR. [`train`] runs the SGD
//! loop.

pub mod audio;
pub mod datagen;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use audio::{read_wav, synth_speaker, write_wav, CorpusManifest, SpeakerKind, Waveform, SAMPLE_RATE};
pub use error::{Error, Result};
pub use datagen::{Corpus, EvalPair, TrainingExample};
pub use dsp::{LogMagSpectrogram, TfMatrix};
pub use metrics::{bss_eval, BssEvalResult};
pub use model::{FramePair, ModelConfig, SeparationModel, SpeakerEmbedding};
