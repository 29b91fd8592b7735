//! FPETS: a fully parallel, non-autoregressive text-to-speech acoustic model.
//!
//! Phonemes are encoded by a gated convolutional encoder, while a U-shaped
//! convolutional predictor assigns each phoneme an alignment width. Widths
//! become positions on the frame axis, and a sine/cosine position encoding of
//! phonemes (keys) and frames (queries) turns those positions into an
//! attention matrix in a single matrix product. Decoders then map the
//! attended encoder states to spectrogram frames in one parallel pass.

pub mod alignment;
pub mod audiofeat;
pub mod bench;
pub mod error;
pub mod nnmodel;
pub mod numcore;
pub mod synthesis;
pub mod training;

pub use error::{Error, Result};
