//! RIFF/WAVE reading (PCM16 and IEEE float32) and PCM16 writing.

use std::fs;
use std::path::Path;

use crate::dsp::{Signal, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 0x0001;
const FORMAT_FLOAT: u16 = 0x0003;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

fn format_name(tag: u16) -> &'static str {
    match tag {
        0x0002 => "ADPCM",
        0x0006 => "A-law",
        0x0007 => "mu-law",
        0x0055 => "MPEG layer 3",
        _ => "unknown",
    }
}

struct FmtChunk {
    tag: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

/// Decode a WAV file to mono at the default sample rate.
pub fn decode_wav(path: &Path) -> Result<Signal> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav_bytes(&bytes).map_err(|e| match e {
        Error::Format { what, msg } => Error::Format {
            what,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn decode_wav_bytes(bytes: &[u8]) -> Result<Signal> {
    let bad = |msg: String| Error::format("WAV file", msg);
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("missing RIFF/WAVE header".into()));
    }
    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body.checked_add(size).filter(|&e| e <= bytes.len());
        match id {
            b"fmt " => {
                let end = end.ok_or_else(|| bad("truncated fmt chunk".into()))?;
                if size < 16 {
                    return Err(bad(format!("fmt chunk of {size} bytes is too short")));
                }
                let b = &bytes[body..end];
                let mut tag = u16_at(b, 0);
                if tag == FORMAT_EXTENSIBLE && size >= 26 {
                    // The sub-format GUID starts with the actual format tag.
                    tag = u16_at(b, 24);
                }
                fmt = Some(FmtChunk {
                    tag,
                    channels: u16_at(b, 2),
                    sample_rate: u32_at(b, 4),
                    bits: u16_at(b, 14),
                });
            }
            b"data" => {
                let end = end.ok_or_else(|| {
                    bad(format!(
                        "truncated data chunk: header claims {size} bytes, {} present",
                        bytes.len() - body
                    ))
                })?;
                data = Some(&bytes[body..end]);
                break;
            }
            _ => {}
        }
        // Chunks are padded to an even length.
        pos = body + size + (size & 1);
    }
    let fmt = fmt.ok_or_else(|| bad("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| bad("no data chunk".into()))?;
    if fmt.channels == 0 {
        return Err(bad("zero channels".into()));
    }
    if fmt.sample_rate == 0 {
        return Err(bad("zero sample rate".into()));
    }
    let decode: fn(&[u8]) -> f64 = match (fmt.tag, fmt.bits) {
        (FORMAT_PCM, 16) => |b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0,
        (FORMAT_FLOAT, 32) => |b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        (FORMAT_PCM, bits) | (FORMAT_FLOAT, bits) => {
            return Err(bad(format!(
                "unsupported sample width {bits} bits for format tag 0x{:04X}",
                fmt.tag
            )))
        }
        (tag, _) => {
            return Err(bad(format!(
                "unsupported format tag 0x{tag:04X} ({})",
                format_name(tag)
            )))
        }
    };
    let width = fmt.bits as usize / 8;
    let frame = width * fmt.channels as usize;
    if data.len() % frame != 0 {
        return Err(bad(format!(
            "data chunk of {} bytes is not a whole number of {frame}-byte frames",
            data.len()
        )));
    }
    let channels = fmt.channels as f64;
    let mono: Vec<f64> = data
        .chunks_exact(frame)
        .map(|f| f.chunks_exact(width).map(decode).sum::<f64>() / channels)
        .collect();
    if mono.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite float sample".into()));
    }
    let samples = if fmt.sample_rate == DEFAULT_SAMPLE_RATE {
        mono
    } else {
        resample_linear(&mono, fmt.sample_rate, DEFAULT_SAMPLE_RATE)
    };
    Signal::new(samples, DEFAULT_SAMPLE_RATE)
}

/// Linear-interpolation resampling to `round(N·to/from)` samples.
pub fn resample_linear(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if x.is_empty() || from == to {
        return x.to_vec();
    }
    let n_out = (x.len() as f64 * to as f64 / from as f64).round() as usize;
    let step = from as f64 / to as f64;
    (0..n_out)
        .map(|i| {
            let t = i as f64 * step;
            let i0 = t.floor() as usize;
            if i0 + 1 >= x.len() {
                return x[x.len() - 1];
            }
            let frac = t - i0 as f64;
            x[i0] + (x[i0 + 1] - x[i0]) * frac
        })
        .collect()
}

fn header(channels: u16, sample_rate: u32, bits: u16, tag: u16, data_len: usize) -> Vec<u8> {
    let block = channels * bits / 8;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * block as u32).to_le_bytes());
    out.extend_from_slice(&block.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    out
}

/// Mono 16-bit PCM. Samples are clipped to the representable range.
pub fn encode_wav_pcm16(signal: &Signal) -> Vec<u8> {
    let mut out = header(1, signal.sample_rate(), 16, FORMAT_PCM, signal.len() * 2);
    for &s in signal.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Interleaved 32-bit float frames (`frames[i]` holds one value per channel).
pub fn encode_wav_f32(frames: &[Vec<f32>], sample_rate: u32) -> Vec<u8> {
    let channels = frames.first().map_or(1, Vec::len) as u16;
    let mut out = header(channels, sample_rate, 32, FORMAT_FLOAT, frames.len() * channels as usize * 4);
    for f in frames {
        for v in f {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_wav_pcm16(path: &Path, signal: &Signal) -> Result<()> {
    fs::write(path, encode_wav_pcm16(signal)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcm16(channels: u16, rate: u32, samples: &[i16]) -> Vec<u8> {
        let mut out = header(channels, rate, 16, FORMAT_PCM, samples.len() * 2);
        for s in samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    #[test]
    fn pcm16_scaling() {
        let s = decode_wav_bytes(&pcm16(1, 22_050, &[16384, -32768, 0])).unwrap();
        assert_eq!(s.samples(), &[0.5, -1.0, 0.0]);
    }

    #[test]
    fn stereo_is_averaged() {
        let bytes = encode_wav_f32(&[vec![0.2, 0.4], vec![-1.0, 1.0]], 22_050);
        let s = decode_wav_bytes(&bytes).unwrap();
        assert!((s.samples()[0] - 0.3).abs() < 1e-7);
        assert_eq!(s.samples()[1], 0.0);
    }

    #[test]
    fn resampled_length() {
        let s = decode_wav_bytes(&pcm16(1, 44_100, &[100; 1001])).unwrap();
        assert_eq!(s.len(), (1001.0f64 * 22050.0 / 44100.0).round() as usize);
        assert_eq!(s.sample_rate(), 22_050);
        let s = decode_wav_bytes(&pcm16(1, 16_000, &[0; 16_000])).unwrap();
        assert_eq!(s.len(), 22_050);
    }

    #[test]
    fn linear_interpolation_of_a_ramp() {
        let x: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let y = resample_linear(&x, 10, 20);
        assert_eq!(y.len(), 20);
        assert_eq!(y[3], 1.5);
        assert_eq!(y[19], 9.0);
    }

    #[test]
    fn unsupported_tag_is_named() {
        let bytes = header(1, 22_050, 4, 0x0002, 0);
        let err = decode_wav_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("0x0002"), "{err}");
        let bytes = header(1, 22_050, 24, FORMAT_PCM, 0);
        assert!(decode_wav_bytes(&bytes).is_err());
    }

    #[test]
    fn truncation_is_detected() {
        let mut bytes = pcm16(1, 22_050, &[1, 2, 3, 4]);
        bytes.truncate(bytes.len() - 3);
        let err = decode_wav_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        assert!(decode_wav_bytes(b"RIFF").is_err());
        assert!(decode_wav_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn skips_unknown_chunks() {
        let plain = pcm16(1, 22_050, &[7, 8]);
        let mut bytes = plain[..12].to_vec();
        bytes.extend_from_slice(b"LIST");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 3, 0]);
        bytes.extend_from_slice(&plain[12..]);
        let s = decode_wav_bytes(&bytes).unwrap();
        assert_eq!(s.len(), 2);
    }
}
