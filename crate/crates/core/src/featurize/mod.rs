//! Fixed-shape model inputs derived from one utterance.

pub mod cache;
mod text;

use serde::{Deserialize, Serialize};

use crate::dsp::{self, DspConfig, Signal, DB_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use text::{encode_text, tokenize, EmbeddingTable};

/// Clip length every utterance is trimmed or padded to.
pub const TARGET_SECONDS: f64 = 6.0;
/// Time frames kept from each spectrogram.
pub const SPEC_FRAMES: usize = 256;
/// Words kept from each transcript.
pub const MAX_WORDS: usize = 128;
pub const EMBEDDING_DIM: usize = 300;

/// The feature tensors a model variant can consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureKind {
    Spectrogram,
    Mfcc,
    SpectrogramDs2,
    Text,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 4] = [
        FeatureKind::Spectrogram,
        FeatureKind::Mfcc,
        FeatureKind::SpectrogramDs2,
        FeatureKind::Text,
    ];

    /// Short name used in cache file names and on the command line.
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Spectrogram => "spec",
            FeatureKind::Mfcc => "mfcc",
            FeatureKind::SpectrogramDs2 => "spec_ds2",
            FeatureKind::Text => "text",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown feature kind '{s}'")))
    }
}

/// Per-utterance model inputs. Fields are optional so that partially cached
/// utterances can be represented; [`FeatureSet::require`] checks presence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureSet {
    /// n_mels × 256, dB in [−100, 0].
    pub spectrogram: Option<Tensor<f32>>,
    /// n_mfcc × 256.
    pub mfcc: Option<Tensor<f32>>,
    /// Spectrogram mean-pooled by 2 on both axes.
    pub spectrogram_ds2: Option<Tensor<f32>>,
    /// 128 × embedding dim, zero rows past `text_len`.
    pub text: Option<Tensor<f32>>,
    pub text_len: usize,
}

impl FeatureSet {
    pub fn get(&self, kind: FeatureKind) -> Option<&Tensor<f32>> {
        match kind {
            FeatureKind::Spectrogram => self.spectrogram.as_ref(),
            FeatureKind::Mfcc => self.mfcc.as_ref(),
            FeatureKind::SpectrogramDs2 => self.spectrogram_ds2.as_ref(),
            FeatureKind::Text => self.text.as_ref(),
        }
    }

    pub fn set(&mut self, kind: FeatureKind, tensor: Tensor<f32>) {
        let slot = match kind {
            FeatureKind::Spectrogram => &mut self.spectrogram,
            FeatureKind::Mfcc => &mut self.mfcc,
            FeatureKind::SpectrogramDs2 => &mut self.spectrogram_ds2,
            FeatureKind::Text => &mut self.text,
        };
        *slot = Some(tensor);
    }

    pub fn require(&self, kind: FeatureKind) -> Result<&Tensor<f32>> {
        self.get(kind)
            .ok_or_else(|| Error::invalid(format!("missing feature kind: {}", kind.name())))
    }

    pub fn all_finite(&self) -> bool {
        FeatureKind::ALL
            .iter()
            .filter_map(|&k| self.get(k))
            .all(Tensor::all_finite)
    }
}

/// Truncate or zero-pad at the end to exactly `target_seconds` of audio.
pub fn fix_audio_length(signal: &Signal, target_seconds: f64) -> Signal {
    let target = (target_seconds * signal.sample_rate() as f64).round() as usize;
    let mut samples = signal.samples().to_vec();
    samples.resize(target, 0.0);
    Signal::new(samples, signal.sample_rate()).expect("resized signal stays valid")
}

/// Keep the first `frames` columns, padding with `fill` if there are fewer.
fn fit_frames(matrix: &Tensor<f64>, frames: usize, fill: &[f64]) -> Tensor<f32> {
    let (rows, have) = (matrix.dims()[0], matrix.dims()[1]);
    let mut out = Tensor::zeros(&[rows, frames]);
    for r in 0..rows {
        let src = matrix.row(r);
        let dst = &mut out.data_mut()[r * frames..(r + 1) * frames];
        for (t, d) in dst.iter_mut().enumerate() {
            *d = if t < have { src[t] } else { fill[r] } as f32;
        }
    }
    out
}

/// Full-length log-mel spectrogram of the fixed-length clip (before cropping).
pub fn uncropped_log_mel(signal: &Signal, cfg: &DspConfig) -> Result<Tensor<f64>> {
    dsp::mel_spectrogram(&fix_audio_length(signal, TARGET_SECONDS), cfg)
}

fn crop_spectrogram(log_mel: &Tensor<f64>) -> Tensor<f32> {
    let fill = vec![DB_FLOOR; log_mel.dims()[0]];
    fit_frames(log_mel, SPEC_FRAMES, &fill)
}

fn crop_mfcc(log_mel: &Tensor<f64>, n_mfcc: usize) -> Result<Tensor<f32>> {
    let coeffs = dsp::mfcc_from_log_mel(log_mel, n_mfcc)?;
    let fill = dsp::dct_ii(&vec![DB_FLOOR; log_mel.dims()[0]], n_mfcc)?;
    Ok(fit_frames(&coeffs, SPEC_FRAMES, &fill))
}

/// n_mels × 256 log-mel image of a 6-second clip.
pub fn spectrogram_feature(signal: &Signal, cfg: &DspConfig) -> Result<Tensor<f32>> {
    Ok(crop_spectrogram(&uncropped_log_mel(signal, cfg)?))
}

/// n_mfcc × 256 MFCC image of a 6-second clip.
pub fn mfcc_feature(signal: &Signal, cfg: &DspConfig) -> Result<Tensor<f32>> {
    crop_mfcc(&uncropped_log_mel(signal, cfg)?, cfg.n_mfcc)
}

/// Spectrogram and MFCC features from a single STFT pass.
pub fn audio_features(signal: &Signal, cfg: &DspConfig) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let log_mel = uncropped_log_mel(signal, cfg)?;
    Ok((crop_spectrogram(&log_mel), crop_mfcc(&log_mel, cfg.n_mfcc)?))
}

/// 2×2 block mean of a matrix; odd trailing rows/columns are dropped.
pub fn block_mean2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() != 2 || input.dims()[0] < 2 || input.dims()[1] < 2 {
        return Err(Error::invalid(format!(
            "block mean needs a matrix of at least 2×2, got {:?}",
            input.dims()
        )));
    }
    let (h, w) = (input.dims()[0], input.dims()[1]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let x = input.data();
    Ok(Tensor::from_fn(&[oh, ow], |i| {
        let (r, c) = (2 * (i / ow), 2 * (i % ow));
        (x[r * w + c] + x[r * w + c + 1] + x[(r + 1) * w + c] + x[(r + 1) * w + c + 1]) * quarter
    }))
}

/// Halve a 128 × 256 spectrogram in time and frequency.
pub fn downsample2(spec: &Tensor<f32>) -> Result<Tensor<f32>> {
    if spec.dims() != [dsp::DEFAULT_N_MELS, SPEC_FRAMES] {
        return Err(Error::invalid(format!(
            "downsample2 expects a {}×{} spectrogram, got {:?}",
            dsp::DEFAULT_N_MELS,
            SPEC_FRAMES,
            spec.dims()
        )));
    }
    block_mean2(spec)
}

/// Text matrix for a transcript.
pub fn text_feature(transcript: &str, table: &EmbeddingTable) -> (Tensor<f32>, usize) {
    encode_text(&tokenize(transcript), table, MAX_WORDS)
}

/// Compute the requested feature kinds for one utterance.
pub fn featurize(
    signal: Option<&Signal>,
    transcript: &str,
    kinds: &[FeatureKind],
    cfg: &DspConfig,
    table: Option<&EmbeddingTable>,
) -> Result<FeatureSet> {
    let mut set = FeatureSet::default();
    let wants = |k| kinds.contains(&k);
    if wants(FeatureKind::Spectrogram) || wants(FeatureKind::Mfcc) || wants(FeatureKind::SpectrogramDs2) {
        let signal = signal.ok_or_else(|| Error::invalid("audio features requested without audio"))?;
        let log_mel = uncropped_log_mel(signal, cfg)?;
        let spec = crop_spectrogram(&log_mel);
        if wants(FeatureKind::SpectrogramDs2) {
            set.spectrogram_ds2 = Some(block_mean2(&spec)?);
        }
        if wants(FeatureKind::Mfcc) {
            set.mfcc = Some(crop_mfcc(&log_mel, cfg.n_mfcc)?);
        }
        if wants(FeatureKind::Spectrogram) {
            set.spectrogram = Some(spec);
        }
    }
    if wants(FeatureKind::Text) {
        let table = table.ok_or_else(|| Error::invalid("text features requested without an embedding table"))?;
        let (text, len) = text_feature(transcript, table);
        set.text = Some(text);
        set.text_len = len;
    }
    Ok(set)
}
