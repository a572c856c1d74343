//! Speech emotion recognition from mel spectrograms, MFCCs and transcripts.
//!
//! The crate is organised as a pipeline:
//!
//! - [`dsp`]: STFT, mel filterbank, log-mel spectrogram and MFCC extraction.
//! - [`featurize`]: fixed-shape model inputs plus the binary feature cache.
//! - [`nn`]: a small tape-based autodiff engine with the layers and the
//!   Adadelta optimizer the models need.
//! - [`models`]: the seven CNN variants (text, spectrogram, MFCC and fused).
//! - [`data`]: manifests, WAV decoding, embedding tables, stratified folds.
//! - [`train`]: the training loop, metrics and cross-validation.

pub mod data;
pub mod dsp;
pub mod error;
pub mod featurize;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
