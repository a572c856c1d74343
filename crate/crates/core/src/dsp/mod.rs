//! Audio front end: STFT, mel spectrogram and MFCC extraction.
//!
//! Everything in here runs in double precision. Callers downcast at the
//! feature boundary.

mod dct;
mod fft;
mod mel;

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use dct::{dct_ii, DctII};
pub use fft::Fft;
pub use mel::{
    hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, mfcc, mfcc_from_log_mel, power_to_db,
    MelFilterbank, DB_FLOOR, POWER_FLOOR,
};

pub const DEFAULT_SAMPLE_RATE: u32 = 22_050;
pub const DEFAULT_N_FFT: usize = 2048;
pub const DEFAULT_HOP: usize = 512;
pub const DEFAULT_N_MELS: usize = 128;
pub const DEFAULT_N_MFCC: usize = 40;

/// Mono audio in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WindowKind {
    #[default]
    Hann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            n_fft: DEFAULT_N_FFT,
            hop: DEFAULT_HOP,
            window: WindowKind::Hann,
            n_mels: DEFAULT_N_MELS,
            n_mfcc: DEFAULT_N_MFCC,
            fmin: 0.0,
            fmax: DEFAULT_SAMPLE_RATE as f64 / 2.0,
        }
    }
}

impl DspConfig {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of STFT frames produced for `n_samples` input samples.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample_rate must be positive"));
        }
        if self.n_fft < 2 || !self.n_fft.is_power_of_two() {
            return Err(Error::invalid(format!(
                "n_fft must be a power of two >= 2, got {}",
                self.n_fft
            )));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::invalid(format!(
                "hop must be in [1, n_fft], got {}",
                self.hop
            )));
        }
        if self.n_mels == 0 || self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::invalid(format!(
                "need 1 <= n_mfcc <= n_mels, got n_mfcc={} n_mels={}",
                self.n_mfcc, self.n_mels
            )));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(Error::invalid(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got fmin={} fmax={}",
                self.fmin, self.fmax
            )));
        }
        Ok(())
    }
}

/// Periodic Hann window, `w[n] = 0.5·(1 − cos(2πn/len))`.
pub fn hann_window(length: usize) -> Result<Vec<f64>> {
    if length == 0 {
        return Err(Error::invalid("window length must be at least 1"));
    }
    let n = length as f64;
    Ok((0..length)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n).cos()))
        .collect())
}

/// One-sided spectrum of a single frame, `n_fft/2 + 1` bins.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexFrame {
    pub bins: Vec<Complex64>,
}

/// Index into a reflect-padded signal of length `n` (edge sample not repeated).
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Centered short-time Fourier transform with reflect padding of `n_fft/2`.
pub fn stft(signal: &Signal, cfg: &DspConfig) -> Result<Vec<ComplexFrame>> {
    cfg.validate()?;
    if signal.is_empty() {
        return Err(Error::invalid("cannot transform an empty signal"));
    }
    let fft = Fft::new(cfg.n_fft)?;
    let window = hann_window(cfg.n_fft)?;
    let x = signal.samples();
    let pad = (cfg.n_fft / 2) as isize;
    let n_frames = cfg.frame_count(x.len());

    let mut frame = vec![0.0; cfg.n_fft];
    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let start = (t * cfg.hop) as isize - pad;
        for (j, slot) in frame.iter_mut().enumerate() {
            *slot = x[reflect_index(start + j as isize, x.len())] * window[j];
        }
        frames.push(ComplexFrame {
            bins: fft.real_forward(&frame),
        });
    }
    Ok(frames)
}

/// `|X|²` per bin, laid out bins × frames.
pub fn power_spectrogram(frames: &[ComplexFrame]) -> Result<Tensor<f64>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("no frames to convert"))?;
    let n_bins = first.bins.len();
    let n_frames = frames.len();
    let mut out = Tensor::zeros(&[n_bins, n_frames]);
    let data = out.data_mut();
    for (t, frame) in frames.iter().enumerate() {
        if frame.bins.len() != n_bins {
            return Err(Error::invalid(format!(
                "frame {t} has {} bins, expected {n_bins}",
                frame.bins.len()
            )));
        }
        for (k, b) in frame.bins.iter().enumerate() {
            data[k * n_frames + t] = b.norm_sqr();
        }
    }
    Ok(out)
}

/// Matrix product of rank-2 tensors.
pub(crate) fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let n = b.dims()[1];
    assert_eq!(b.dims()[0], k, "matmul inner dimension mismatch");
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        (k as isize, 1),
        b.data(),
        (n as isize, 1),
        T::zero(),
        out.data_mut(),
        (n as isize, 1),
    );
    out
}
