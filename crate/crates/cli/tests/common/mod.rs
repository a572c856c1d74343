//! Synthetic corpus: four "emotions" with distinct tone and noise
//! signatures, keyword-bearing transcripts and a toy embedding table.

#![allow(dead_code)]

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use ser_forge_core::data::{write_wav_pcm16, EmotionLabel};
use ser_forge_core::dsp::Signal;
use ser_forge_core::nn::seed_rng;

pub const RATE: u32 = 22_050;
pub const EMBEDDING_DIM: usize = 300;

const FILLER: &[&str] = &[
    "the", "a", "i", "you", "it", "was", "today", "really", "we", "they", "just", "about", "that", "so",
];

const KEYWORDS: [&[&str]; 4] = [
    &["fine", "okay", "normal"],
    &["great", "wonderful", "love"],
    &["miss", "lonely", "cry"],
    &["hate", "furious", "stupid"],
];

/// One clip of `class`'s signature, 2 to 5 seconds long.
pub fn synth_audio<R: Rng>(class: usize, rng: &mut R) -> Signal {
    let seconds = rng.gen_range(2.0..5.0);
    let n = (seconds * RATE as f64) as usize;
    let dt = 1.0 / RATE as f64;
    let mut brown = 0.0f64;
    let mut x = Vec::with_capacity(n);
    let f0 = match class {
        0 => rng.gen_range(200.0..240.0),
        1 => rng.gen_range(500.0..600.0),
        2 => rng.gen_range(110.0..130.0),
        _ => rng.gen_range(2000.0..2600.0),
    };
    let phase: f64 = rng.gen_range(0.0..TAU);
    let gain = rng.gen_range(0.7..1.0);
    for i in 0..n {
        let t = i as f64 * dt;
        let white: f64 = rng.gen_range(-1.0..1.0);
        let v = match class {
            // steady voiced tone with harmonics
            0 => (1..=3).map(|h| (TAU * f0 * h as f64 * t + phase).sin() / h as f64).sum::<f64>() * 0.25,
            // rising chirp, tremolo at 6 Hz
            1 => {
                let sweep = f0 * t + 250.0 * t * t;
                (TAU * sweep + phase).sin() * (0.6 + 0.4 * (TAU * 6.0 * t).sin()) * 0.4
            }
            // low hum over brown noise
            2 => {
                brown = 0.98 * brown + 0.02 * white;
                (TAU * f0 * t + phase).sin() * 0.2 + brown * 2.0
            }
            // bright tone in noise bursts
            _ => {
                let burst = if (t * 4.0).fract() < 0.5 { 1.0 } else { 0.3 };
                ((TAU * f0 * t + phase).sin() * 0.3 + white * 0.3) * burst
            }
        };
        x.push((v * gain + 0.01 * white).clamp(-1.0, 1.0));
    }
    Signal::new(x, RATE).expect("valid clip")
}

pub fn synth_transcript<R: Rng>(class: usize, rng: &mut R) -> String {
    let mut words: Vec<&str> = (0..rng.gen_range(4..10))
        .map(|_| *FILLER.choose(rng).unwrap())
        .collect();
    for _ in 0..rng.gen_range(1..=2) {
        let at = rng.gen_range(0..=words.len());
        words.insert(at, KEYWORDS[class].choose(rng).unwrap());
    }
    words.join(" ")
}

/// Random vectors for every filler and keyword token.
pub fn toy_embeddings(seed: u64) -> String {
    let mut rng = seed_rng(seed);
    let mut s = String::new();
    let vocab = FILLER.iter().chain(KEYWORDS.iter().flat_map(|k| k.iter()));
    for w in vocab {
        s.push_str(w);
        for _ in 0..EMBEDDING_DIM {
            let _ = write!(s, " {:.5}", rng.gen_range(-1.0f32..1.0));
        }
        s.push('\n');
    }
    s
}

pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub embeddings: PathBuf,
    pub labels: Vec<EmotionLabel>,
}

/// Write `per_class` utterances of each class (WAVs, manifest, embeddings)
/// under `dir`.
pub fn write_corpus(dir: &Path, per_class: usize, seed: u64) -> Corpus {
    let mut rng = seed_rng(seed);
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir).unwrap();
    let mut manifest = String::new();
    let mut labels = Vec::new();
    for i in 0..per_class * 4 {
        let class = i % 4;
        let label = EmotionLabel::ALL[class];
        let id = format!("utt{i:04}");
        write_wav_pcm16(&wav_dir.join(format!("{id}.wav")), &synth_audio(class, &mut rng)).unwrap();
        let line = serde_json::json!({
            "id": id,
            "wav_path": format!("wav/{id}.wav"),
            "transcript": synth_transcript(class, &mut rng),
            "label": label.name(),
        });
        manifest.push_str(&line.to_string());
        manifest.push('\n');
        labels.push(label);
    }
    let manifest_path = dir.join("manifest.jsonl");
    fs::write(&manifest_path, manifest).unwrap();
    let embeddings = dir.join("vectors.txt");
    fs::write(&embeddings, toy_embeddings(seed)).unwrap();
    Corpus {
        dir: dir.to_path_buf(),
        manifest: manifest_path,
        embeddings,
        labels,
    }
}

/// Desk-scale model widths at the full 128×256 / 40×256 / 128×300 input
/// geometry.
pub const DESK_CONFIG: &str = "\
# desk-scale widths, full input geometry
kernels_per_path = 4
spec_kernels = 4x6, 8x10
mfcc_kernels = 2x4, 4x6
text_filters_per_size = 8
text_kernel_heights = 1, 2, 3
text_fc_size = 16
fc0 = 32
fc1 = 16
dropout = 0.25
epochs = 30
batch_size = 16
early_stop_patience = 5
target_accuracy = 1.0
";

pub fn write_config(dir: &Path, corpus: &Corpus, extra: &str) -> PathBuf {
    let path = dir.join("run.conf");
    let text = format!(
        "{DESK_CONFIG}manifest = {}\nembeddings = {}\ncache_dir = {}\ncheckpoint_dir = {}\n{extra}",
        corpus.manifest.display(),
        corpus.embeddings.display(),
        dir.join("cache").display(),
        dir.join("out").display(),
    );
    fs::write(&path, text).unwrap();
    path
}
