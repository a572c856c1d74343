//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p ser-forge --test acceptance --release`.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::Rng;
use ser_forge::{cmd_featurize, cmd_xval, RunArgs, RunConfig};
use ser_forge_core::data::{parse_manifest, stratified_kfold, EmotionLabel};
use ser_forge_core::dsp::{dct_ii, hz_to_mel, mel_filterbank, stft, DspConfig, Signal};
use ser_forge_core::featurize::{mfcc_feature, spectrogram_feature, FeatureKind, FeatureSet};
use ser_forge_core::models::{gradient_check, ModelConfig, ModelGraph, ModelVariant};
use ser_forge_core::nn::gradcheck::layer_checks;
use ser_forge_core::nn::{seed_rng, Adadelta, ParamStore};
use ser_forge_core::train::{evaluate_predictions, train_model, EvalReport, TrainConfig};
use ser_forge_core::Tensor;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, limit: Duration) -> Result<(), String> {
    ensure(start.elapsed() <= limit, || {
        format!("took {:.0?}, budget {:.0?}", start.elapsed(), limit)
    })
}

// ---------------------------------------------------------------- C1

/// Reflect-padded frame `t`, windowed, transformed by the O(N²) DFT.
fn naive_frame(x: &[f64], n_fft: usize, hop: usize, t: usize) -> Vec<Complex64> {
    let n = x.len() as isize;
    let reflect = |mut i: isize| -> f64 {
        // numpy "reflect": mirror about the end samples without repeating them
        loop {
            if i < 0 {
                i = -i;
            } else if i >= n {
                i = 2 * (n - 1) - i;
            } else {
                return x[i as usize];
            }
        }
    };
    let start = (t * hop) as isize - (n_fft / 2) as isize;
    let frame: Vec<f64> = (0..n_fft)
        .map(|j| {
            let w = 0.5 - 0.5 * (std::f64::consts::TAU * j as f64 / n_fft as f64).cos();
            reflect(start + j as isize) * w
        })
        .collect();
    (0..=n_fft / 2)
        .map(|k| {
            frame
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    let angle = -std::f64::consts::TAU * ((k * j) % n_fft) as f64 / n_fft as f64;
                    Complex64::from_polar(v, angle)
                })
                .sum()
        })
        .collect()
}

fn c1_stft_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = seed_rng(1);
    let mut worst = 0.0f64;
    let mut frames_checked = 0;
    for n_fft in [8usize, 64, 2048] {
        let hop = (n_fft / 4).max(1);
        let len = hop * 110 + rng.gen_range(0..hop);
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = DspConfig {
            n_fft,
            hop,
            n_mels: 4,
            n_mfcc: 2,
            ..DspConfig::default()
        };
        let frames = stft(&Signal::new(x.clone(), 22_050).unwrap(), &cfg).map_err(|e| e.to_string())?;
        ensure(frames.len() >= 100, || format!("only {} frames", frames.len()))?;
        for (t, f) in frames.iter().enumerate() {
            let want = naive_frame(&x, n_fft, hop, t);
            let scale = want.iter().map(|c| c.norm()).fold(0.0, f64::max);
            let err = f
                .bins
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            worst = worst.max(err / scale);
            frames_checked += 1;
        }
    }
    ensure(worst <= 1e-9, || format!("max relative error {worst:.3e} > 1e-9"))?;
    within_budget(start, Duration::from_secs(30))?;
    Ok(format!(
        "{frames_checked} frames over n_fft 8/64/2048, max rel err {worst:.2e}, {:.1?}",
        start.elapsed()
    ))
}

// ---------------------------------------------------------------- C2

fn c2_mel_mfcc_contracts() -> Outcome {
    let m = hz_to_mel(1000.0).map_err(|e| e.to_string())?;
    ensure(m == 15.0, || format!("hz_to_mel(1000) = {m:?}"))?;

    for (n, c) in [(8usize, 1.0f64), (40, -2.5), (128, 0.3)] {
        let y = dct_ii(&vec![c; n], n).map_err(|e| e.to_string())?;
        let want0 = c * (n as f64).sqrt();
        ensure((y[0] - want0).abs() <= 1e-12 * want0.abs().max(1.0), || {
            format!("DCT DC term {} vs {want0}", y[0])
        })?;
        ensure(y[1..].iter().all(|v| v.abs() <= 1e-12), || format!("DCT of constant length {n} leaks"))?;
    }

    let fb = mel_filterbank(&DspConfig::default()).map_err(|e| e.to_string())?;
    ensure(fb.weights.dims() == [128, 1025], || format!("filterbank dims {:?}", fb.weights.dims()))?;
    for r in 0..128 {
        let row = fb.weights.row(r);
        ensure(row.iter().all(|&w| w >= 0.0), || format!("row {r} has a negative weight"))?;
        let peak = row.iter().enumerate().fold(0, |b, (i, &w)| if w > row[b] { i } else { b });
        let rising = row[..=peak].windows(2).all(|p| p[0] <= p[1]);
        let falling = row[peak..].windows(2).all(|p| p[0] >= p[1]);
        ensure(rising && falling, || format!("row {r} is not unimodal"))?;
    }

    let cfg = DspConfig::default();
    let mut rng = seed_rng(2);
    let lengths = [1usize, 100, 2048, 22_050, 66_150, 132_300, 200_000];
    for &n in &lengths {
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let sig = Signal::new(x, 22_050).unwrap();
        let s = spectrogram_feature(&sig, &cfg).map_err(|e| e.to_string())?;
        let m = mfcc_feature(&sig, &cfg).map_err(|e| e.to_string())?;
        ensure(s.dims() == [128, 256] && m.dims() == [40, 256], || {
            format!("clip of {n} samples gave {:?} and {:?}", s.dims(), m.dims())
        })?;
        ensure(s.all_finite() && m.all_finite(), || format!("non-finite features for {n} samples"))?;
    }
    Ok(format!(
        "mel(1000)=15, DCT constant, 128x1025 unimodal bank, shapes for {} clip lengths",
        lengths.len()
    ))
}

// ---------------------------------------------------------------- C3

fn c3_gradient_checks() -> Outcome {
    let start = Instant::now();
    let seeds = 10u64;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for seed in 0..seeds {
        for (name, r) in layer_checks(&mut seed_rng(seed)).map_err(|e| e.to_string())? {
            ensure(r.checked > 0, || format!("{name} checked no coordinates"))?;
            checked += r.checked;
            if r.max_rel_error >= worst.0 {
                worst = (r.max_rel_error, format!("{name} seed {seed}"));
            }
        }
        for v in ModelVariant::ALL {
            let r = gradient_check(v, seed, 30).map_err(|e| e.to_string())?;
            ensure(r.checked > 0, || format!("{v} checked no coordinates"))?;
            checked += r.checked;
            if r.max_rel_error >= worst.0 {
                worst = (r.max_rel_error, format!("{v} seed {seed}"));
            }
        }
    }
    ensure(worst.0 <= 1e-4, || format!("max relative error {:.3e} at {}", worst.0, worst.1))?;
    within_budget(start, Duration::from_secs(300))?;
    Ok(format!(
        "{checked} coordinates, {seeds} seeds, worst {:.2e} ({}), {:.1?}",
        worst.0,
        worst.1,
        start.elapsed()
    ))
}

// ---------------------------------------------------------------- C4

fn c4_adadelta_trace() -> Outcome {
    let (rho, eps) = (0.95f64, 1e-6f64);
    // Hand-unrolled updates for g = 1 twice from x = 0.
    let eg1 = (1.0 - rho) * 1.0;
    let d1 = -(eps.sqrt() / (eg1 + eps).sqrt());
    let ed1 = (1.0 - rho) * d1 * d1;
    let eg2 = rho * eg1 + (1.0 - rho);
    let d2 = -((ed1 + eps).sqrt() / (eg2 + eps).sqrt());
    let want = [d1, d1 + d2];
    ensure((d1 - -4.4721e-3).abs() < 5e-8, || format!("hand-derived first step {d1}"))?;

    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", Tensor::new(vec![1], vec![0.0]).unwrap());
    let opt = Adadelta::new(rho, eps).map_err(|e| e.to_string())?;
    let mut got = [0.0; 2];
    for g in &mut got {
        store.param_mut(id).grad.data_mut()[0] = 1.0;
        opt.step(&mut store).map_err(|e| e.to_string())?;
        *g = store.param(id).value.data()[0];
    }
    const LITERAL: [f64; 2] = [-4.47209123431083861e-3, -9.00115349984404598e-3];
    for ((g, w), l) in got.iter().zip(&want).zip(LITERAL) {
        ensure((g - w).abs() <= 1e-10 && (g - l).abs() <= 1e-10, || {
            format!("trace {got:?} vs derived {want:?} and {LITERAL:?}")
        })?;
    }
    // accumulators after two steps
    let ed2 = rho * ed1 + (1.0 - rho) * d2 * d2;
    ensure((eg2 - 0.0975).abs() <= 1e-15 && (ed2 - 1.97560125063383185e-6).abs() <= 1e-18, || {
        format!("accumulators Eg {eg2} Ed {ed2}")
    })?;
    Ok(format!("x1 = {:.10e}, x2 = {:.10e}", got[0], got[1]))
}

// ---------------------------------------------------------------- C5

fn random_sets(config: &ModelConfig, labels: &[EmotionLabel], seed: u64) -> Vec<FeatureSet> {
    let mut rng = seed_rng(seed);
    labels
        .iter()
        .map(|_| {
            let mut set = FeatureSet::default();
            for kind in FeatureKind::ALL {
                let (h, w) = config.input_shape(kind);
                set.set(kind, Tensor::from_fn(&[h, w], |_| rng.gen_range(-1.0f32..1.0)));
            }
            set
        })
        .collect()
}

fn c5_overfit() -> Outcome {
    let start = Instant::now();
    let labels: Vec<EmotionLabel> = (0..16).map(|i| EmotionLabel::ALL[i % 4]).collect();
    let mut epochs = Vec::new();
    for v in ModelVariant::ALL {
        let config = ModelConfig {
            dropout_rate: 0.0,
            ..ModelConfig::reduced(v)
        };
        let sets = random_sets(&config, &labels, 11);
        let refs: Vec<&FeatureSet> = sets.iter().collect();
        let mut graph = ModelGraph::<f32>::build(config, &mut seed_rng(3)).map_err(|e| e.to_string())?;
        let tc = TrainConfig {
            epochs: 300,
            batch_size: 16,
            seed: 3,
            early_stop_patience: None,
            target_accuracy: Some(1.0),
            deterministic: true,
        };
        let h = train_model(&mut graph, &refs, &labels, &tc).map_err(|e| e.to_string())?;
        let last = h.last().unwrap();
        ensure(last.train_accuracy == 1.0, || {
            format!("{v} reached only {} in {} epochs", last.train_accuracy, last.epoch)
        })?;
        epochs.push(format!("{v}:{}", last.epoch));
    }
    within_budget(start, Duration::from_secs(600))?;
    Ok(format!("epochs to 100%: {}, {:.1?}", epochs.join(" "), start.elapsed()))
}

// ---------------------------------------------------------------- C6 / C8

const SEPARABILITY: [(ModelVariant, f64); 5] = [
    (ModelVariant::M4cTextMfcc, 0.95),
    (ModelVariant::M1Text, 0.75),
    (ModelVariant::M2aSpec, 0.75),
    (ModelVariant::M2bSpecDeep, 0.75),
    (ModelVariant::M3Mfcc, 0.75),
];

fn resolve(config: &Path, variant: ModelVariant, out: &Path) -> Result<RunConfig, String> {
    let args = RunArgs {
        config: Some(config.to_path_buf()),
        variant: Some(variant.name().to_string()),
        k: Some(5),
        seed: Some(17),
        checkpoint_dir: Some(out.to_path_buf()),
        ..Default::default()
    };
    args.resolve().map_err(|e| e.to_string())
}

fn run_xval_suite(config: &Path, out: &Path) -> Result<Vec<(ModelVariant, EvalReport, Duration)>, String> {
    let mut reports = Vec::new();
    for (v, _) in SEPARABILITY {
        let t = Instant::now();
        let cfg = resolve(config, v, out)?;
        let r = cmd_xval(&cfg).map_err(|e| format!("{v}: {e}"))?;
        reports.push((v, r, t.elapsed()));
    }
    Ok(reports)
}

fn c6_separability(dir: &Path) -> Outcome {
    let start = Instant::now();
    let corpus = common::write_corpus(dir, 50, 5);
    let config = common::write_config(dir, &corpus, "");
    let cfg = resolve(&config, ModelVariant::M4cTextMfcc, &dir.join("out"))?;
    let summary = cmd_featurize(&cfg).map_err(|e| e.to_string())?;
    ensure(summary.failed.is_empty() && summary.written == 800, || summary.line())?;
    let featurized = start.elapsed();

    let reports = run_xval_suite(&config, &dir.join("out"))?;
    let mut parts = vec![format!("featurize {featurized:.0?}")];
    let mut failures = Vec::new();
    for ((v, r, took), (_, floor)) in reports.iter().zip(SEPARABILITY) {
        parts.push(format!("{v} {:.1}% ({took:.0?})", 100.0 * r.overall_accuracy));
        if r.overall_accuracy < floor {
            failures.push(format!("{v} {:.3} < {floor}", r.overall_accuracy));
        }
    }
    ensure(failures.is_empty(), || format!("{}; {}", failures.join(", "), parts.join(", ")))?;
    within_budget(start, Duration::from_secs(900))?;
    Ok(format!("{}, total {:.0?}", parts.join(", "), start.elapsed()))
}

fn c8_determinism(dir: &Path) -> Outcome {
    let config = dir.join("run.conf");
    ensure(config.is_file(), || "criterion 6 corpus is missing".into())?;
    let again = dir.join("out-repeat");
    run_xval_suite(&config, &again)?;
    for (v, _) in SEPARABILITY {
        let name = format!("{}.xval.json", v.name());
        let a = fs::read(dir.join("out").join(&name)).map_err(|e| e.to_string())?;
        let b = fs::read(again.join(&name)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{name} differs between runs"))?;
    }
    // Feature extraction is byte-stable as well.
    let corpus_cfg = resolve(&config, ModelVariant::M4cTextMfcc, &again)?;
    let recache = RunConfig {
        cache_dir: dir.join("cache-repeat"),
        ..corpus_cfg.clone()
    };
    cmd_featurize(&recache).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for entry in fs::read_dir(&corpus_cfg.cache_dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let twin = recache.cache_dir.join(path.file_name().unwrap());
        ensure(fs::read(&path).ok() == fs::read(&twin).ok(), || {
            format!("{} differs", path.display())
        })?;
        compared += 1;
    }
    Ok(format!(
        "{} reports and {compared} cache files byte-identical",
        SEPARABILITY.len()
    ))
}

// ---------------------------------------------------------------- C7

fn c7_metrics() -> Outcome {
    let mut truth = Vec::new();
    for (c, n) in [488, 123, 269, 120].into_iter().enumerate() {
        truth.extend(std::iter::repeat(EmotionLabel::ALL[c]).take(n));
    }
    let r = evaluate_predictions(&truth, &vec![EmotionLabel::Neutral; truth.len()]).map_err(|e| e.to_string())?;
    ensure((r.overall_accuracy - 0.488).abs() < 1e-12, || format!("overall {}", r.overall_accuracy))?;
    ensure((r.class_accuracy - 0.25).abs() < 1e-12, || format!("class {}", r.class_accuracy))?;

    let mut rng = seed_rng(7);
    let noisy: Vec<EmotionLabel> = truth
        .iter()
        .map(|&t| if rng.gen_bool(0.6) { t } else { EmotionLabel::ALL[rng.gen_range(0..4)] })
        .collect();
    for report in [&r, &evaluate_predictions(&truth, &noisy).map_err(|e| e.to_string())?] {
        for (c, row) in report.confusion.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            ensure((sum - 100.0).abs() <= 0.01, || format!("row {c} sums to {sum}"))?;
        }
    }
    Ok("always-neutral: overall 0.488, class 0.250; rows sum to 100".into())
}

// ---------------------------------------------------------------- C9

fn c9_folds() -> Outcome {
    let mut rng = seed_rng(9);
    let mut worst = 0.0f64;
    for m in 0..100 {
        let k = rng.gen_range(2..=10);
        let counts: Vec<usize> = (0..4)
            .map(|_| if rng.gen_bool(0.1) { 0 } else { rng.gen_range(k..=120) })
            .collect();
        let mut text = String::new();
        let mut id = 0;
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                text.push_str(&format!(
                    "{{\"id\":\"m{m}u{id}\",\"wav_path\":\"x.wav\",\"transcript\":\"\",\"label\":\"{}\"}}\n",
                    EmotionLabel::ALL[c].name()
                ));
                id += 1;
            }
        }
        if id == 0 {
            continue;
        }
        let records = parse_manifest(&text, Path::new("")).map_err(|e| e.to_string())?;
        let plan = stratified_kfold(&records, k, rng.gen()).map_err(|e| e.to_string())?;
        ensure(plan.assignments.len() == records.len(), || format!("manifest {m}: not a partition"))?;
        let mut tally = vec![[0usize; 4]; k];
        for r in &records {
            let f = plan.fold_of(&r.id).ok_or(format!("manifest {m}: {} unassigned", r.id))?;
            ensure(f < k, || format!("manifest {m}: fold {f} out of range"))?;
            tally[f][r.label.unwrap().index()] += 1;
        }
        for fold in &tally {
            for c in 0..4 {
                let dev = (fold[c] as f64 - counts[c] as f64 / k as f64).abs();
                worst = worst.max(dev);
            }
        }
    }
    ensure(worst <= 1.0, || format!("deviation {worst} from the proportional share"))?;
    Ok(format!("100 manifests, max deviation {worst:.3} from n_c/k"))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .is_test(true)
        .try_init();
    let work = tempfile::tempdir().expect("temp dir");
    let dir = work.path();
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("C1 STFT vs naive DFT", Box::new(c1_stft_oracle)),
        ("C2 mel/MFCC contracts", Box::new(c2_mel_mfcc_contracts)),
        ("C3 gradient checks", Box::new(c3_gradient_checks)),
        ("C4 Adadelta trace", Box::new(c4_adadelta_trace)),
        ("C5 overfit capacity", Box::new(c5_overfit)),
        ("C6 synthetic separability", Box::new(|| c6_separability(dir))),
        ("C7 metrics contract", Box::new(c7_metrics)),
        ("C8 determinism", Box::new(|| c8_determinism(dir))),
        ("C9 fold stratification", Box::new(c9_folds)),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
