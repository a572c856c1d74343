//! Slaney-style mel scale, area-normalized triangular filterbank, and the
//! log-mel / MFCC front ends built on top of them.

use log::warn;

use super::{matmul, power_spectrogram, stft, DctII, DspConfig, Signal};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

// Below 1 kHz the scale is linear at 200/3 Hz per mel, written as 3/200 mel per Hz
// so that 1000 Hz maps to exactly 15.
const LOG_REGION_HZ: f64 = 1000.0;
const LOG_REGION_MEL: f64 = 15.0;

/// Powers below this are clamped before taking the logarithm.
pub const POWER_FLOOR: f64 = 1e-10;
/// Lowest value a log-mel entry can take after max-referencing.
pub const DB_FLOOR: f64 = -100.0;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

pub fn hz_to_mel(hz: f64) -> Result<f64> {
    if !(hz >= 0.0) {
        return Err(Error::invalid(format!("frequency must be >= 0, got {hz}")));
    }
    Ok(if hz < LOG_REGION_HZ {
        hz * 3.0 / 200.0
    } else {
        LOG_REGION_MEL + (hz / LOG_REGION_HZ).ln() / log_step()
    })
}

pub fn mel_to_hz(mel: f64) -> Result<f64> {
    if !(mel >= 0.0) {
        return Err(Error::invalid(format!("mel value must be >= 0, got {mel}")));
    }
    Ok(if mel < LOG_REGION_MEL {
        mel * 200.0 / 3.0
    } else {
        LOG_REGION_HZ * (log_step() * (mel - LOG_REGION_MEL)).exp()
    })
}

/// Triangular filters mapping `n_fft/2 + 1` power bins onto `n_mels` bands.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// n_mels × n_bins.
    pub weights: Tensor<f64>,
    /// `n_mels + 2` band edges in Hz; filter `i` spans `edges[i]..edges[i+2]`
    /// and peaks at `edges[i+1]`.
    pub edges_hz: Vec<f64>,
    /// Filters too narrow to cover any FFT bin.
    pub empty_rows: Vec<usize>,
}

pub fn mel_filterbank(cfg: &DspConfig) -> Result<MelFilterbank> {
    cfg.validate()?;
    let n_bins = cfg.n_bins();
    let mel_lo = hz_to_mel(cfg.fmin)?;
    let mel_hi = hz_to_mel(cfg.fmax)?;
    let n_edges = cfg.n_mels + 2;
    let edges_hz = (0..n_edges)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_edges - 1) as f64))
        .collect::<Result<Vec<_>>>()?;
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64)
        .collect();

    let mut weights = Tensor::zeros(&[cfg.n_mels, n_bins]);
    let mut empty_rows = Vec::new();
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        let norm = 2.0 / (hi - lo);
        let row = &mut weights.data_mut()[m * n_bins..(m + 1) * n_bins];
        for (w, &f) in row.iter_mut().zip(&bin_hz) {
            let rising = (f - lo) / (mid - lo);
            let falling = (hi - f) / (hi - mid);
            *w = rising.min(falling).max(0.0) * norm;
        }
        if row.iter().all(|&w| w == 0.0) {
            empty_rows.push(m);
        }
    }
    if !empty_rows.is_empty() {
        warn!(
            "{} of {} mel filters cover no FFT bin (n_mels too large for n_fft={}): rows {:?}",
            empty_rows.len(),
            cfg.n_mels,
            cfg.n_fft,
            empty_rows
        );
    }
    Ok(MelFilterbank {
        weights,
        edges_hz,
        empty_rows,
    })
}

/// `10·log10(max(x, 1e-10))`, shifted so the largest entry is 0 dB and
/// clamped below at −100 dB.
pub fn power_to_db(power: &Tensor<f64>) -> Tensor<f64> {
    let db = power.map(|x| 10.0 * x.max(POWER_FLOOR).log10());
    let peak = db.max().unwrap_or(0.0);
    db.map(|v| (v - peak).max(DB_FLOOR))
}

/// Log-mel spectrogram, n_mels × frames, in dB relative to its own peak.
pub fn mel_spectrogram(signal: &Signal, cfg: &DspConfig) -> Result<Tensor<f64>> {
    if signal.sample_rate() != cfg.sample_rate {
        return Err(Error::invalid(format!(
            "signal sampled at {} Hz but config expects {} Hz",
            signal.sample_rate(),
            cfg.sample_rate
        )));
    }
    let frames = stft(signal, cfg)?;
    let power = power_spectrogram(&frames)?;
    let bank = mel_filterbank(cfg)?;
    Ok(power_to_db(&matmul(&bank.weights, &power)))
}

/// MFCCs from an existing log-mel spectrogram (n_mels × frames).
pub fn mfcc_from_log_mel(log_mel: &Tensor<f64>, n_mfcc: usize) -> Result<Tensor<f64>> {
    if log_mel.rank() != 2 {
        return Err(Error::invalid("log-mel input must be a matrix"));
    }
    let (n_mels, n_frames) = (log_mel.dims()[0], log_mel.dims()[1]);
    let dct = DctII::new(n_mels, n_mfcc)?;
    let mut out = Tensor::zeros(&[n_mfcc, n_frames]);
    let mut column = vec![0.0; n_mels];
    let mut coeffs = vec![0.0; n_mfcc];
    for t in 0..n_frames {
        for (m, slot) in column.iter_mut().enumerate() {
            *slot = log_mel.data()[m * n_frames + t];
        }
        dct.apply(&column, &mut coeffs);
        for (k, &c) in coeffs.iter().enumerate() {
            out.data_mut()[k * n_frames + t] = c;
        }
    }
    Ok(out)
}

/// MFCC matrix, n_mfcc × frames.
pub fn mfcc(signal: &Signal, cfg: &DspConfig) -> Result<Tensor<f64>> {
    let log_mel = mel_spectrogram(signal, cfg)?;
    mfcc_from_log_mel(&log_mel, cfg.n_mfcc)
}
