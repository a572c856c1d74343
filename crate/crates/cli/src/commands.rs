use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use log::{info, warn};
use rayon::prelude::*;

use ser_forge_core::data::{decode_wav, filter_records, load_embeddings, load_manifest, EmotionLabel, UtteranceRecord};
use ser_forge_core::featurize::cache::{read_sert, write_sert};
use ser_forge_core::featurize::{featurize, EmbeddingTable, FeatureKind, FeatureSet};
use ser_forge_core::models::{gradient_check, ModelGraph, ModelInputs, ModelVariant};
use ser_forge_core::nn::gradcheck::layer_checks;
use ser_forge_core::nn::checkpoint::Checkpoint;
use ser_forge_core::nn::{seed_rng, softmax};
use ser_forge_core::train::{argmax, cross_validate, train_model, EvalReport, TrainHistory};

use crate::config::RunConfig;
use crate::error::CliError;

/// Environment variable capping the featurize worker pool.
pub const THREADS_ENV: &str = "SER_FORGE_THREADS";

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Worker count from `SER_FORGE_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("{THREADS_ENV}='{v}' is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

pub fn cache_path(dir: &Path, id: &str, kind: FeatureKind) -> PathBuf {
    dir.join(format!("{id}.{}.sert", kind.name()))
}

fn check_id(id: &str) -> Result<(), CliError> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(CliError::Data(format!("utterance id '{id}' cannot be used as a file name")));
    }
    Ok(())
}

/// Labelled records the run works on.
pub fn load_records(cfg: &RunConfig) -> Result<Vec<UtteranceRecord>, CliError> {
    let path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::Usage("no manifest given (--manifest or `manifest =`)".into()))?;
    let all = load_manifest(path)?;
    let kept: Vec<UtteranceRecord> = if cfg.filter {
        filter_records(&all)
    } else {
        all.iter().filter(|r| r.label.is_some()).cloned().collect()
    };
    if kept.len() < all.len() {
        info!("{} of {} manifest records kept", kept.len(), all.len());
    }
    for r in &kept {
        check_id(&r.id)?;
    }
    if kept.is_empty() {
        return Err(CliError::Data(format!("no usable records in {}", path.display())));
    }
    Ok(kept)
}

fn load_table(cfg: &RunConfig) -> Result<Option<EmbeddingTable>, CliError> {
    match &cfg.embeddings {
        Some(p) => {
            let t = load_embeddings(p, cfg.embedding_dim)?;
            info!("loaded {} embeddings from {}", t.len(), p.display());
            Ok(Some(t))
        }
        None => Ok(None),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeaturizeSummary {
    pub written: usize,
    pub up_to_date: usize,
    /// `(utterance id, reason)` for each skipped utterance.
    pub failed: Vec<(String, String)>,
}

impl FeaturizeSummary {
    pub fn line(&self) -> String {
        format!(
            "featurize: {} written, {} up-to-date, {} failed",
            self.written,
            self.up_to_date,
            self.failed.len()
        )
    }
}

fn modified(path: &Path) -> Option<SystemTime> {
    fs::metadata(path).and_then(|m| m.modified()).ok()
}

/// Whether `cache` exists and is no older than every source it came from.
fn fresh(cache: &Path, sources: &[Option<SystemTime>]) -> bool {
    match modified(cache) {
        Some(t) => sources.iter().flatten().all(|s| *s <= t),
        None => false,
    }
}

fn featurize_record(
    rec: &UtteranceRecord,
    cfg: &RunConfig,
    kinds: &[FeatureKind],
    table: Option<&EmbeddingTable>,
    text_sources: &[Option<SystemTime>],
) -> Result<(usize, usize), String> {
    let wav_time = modified(&rec.wav_path);
    let todo: Vec<FeatureKind> = kinds
        .iter()
        .copied()
        .filter(|&k| {
            let path = cache_path(&cfg.cache_dir, &rec.id, k);
            cfg.force
                || if k == FeatureKind::Text {
                    !fresh(&path, text_sources)
                } else {
                    !fresh(&path, &[wav_time])
                }
        })
        .collect();
    let skipped = kinds.len() - todo.len();
    if todo.is_empty() {
        return Ok((0, skipped));
    }
    let needs_audio = todo.iter().any(|&k| k != FeatureKind::Text);
    let signal = if needs_audio {
        Some(decode_wav(&rec.wav_path).map_err(|e| e.to_string())?)
    } else {
        None
    };
    let set = featurize(signal.as_ref(), &rec.transcript, &todo, &cfg.dsp, table).map_err(|e| e.to_string())?;
    if !set.all_finite() {
        return Err("non-finite feature values".into());
    }
    for &k in &todo {
        let tensor = set.require(k).map_err(|e| e.to_string())?;
        let path = cache_path(&cfg.cache_dir, &rec.id, k);
        let tmp = path.with_extension("sert.tmp");
        write_sert(&tmp, tensor).map_err(|e| e.to_string())?;
        fs::rename(&tmp, &path).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok((todo.len(), skipped))
}

/// Extract and cache every configured feature kind for every record.
pub fn cmd_featurize(cfg: &RunConfig) -> Result<FeaturizeSummary, CliError> {
    let records = load_records(cfg)?;
    let kinds = cfg.feature_kinds();
    let table = load_table(cfg)?;
    if kinds.contains(&FeatureKind::Text) && table.is_none() {
        return Err(CliError::Usage("text features need an embedding table (--embeddings)".into()));
    }
    fs::create_dir_all(&cfg.cache_dir).map_err(|e| io_error(&cfg.cache_dir, e))?;
    let text_sources = [
        cfg.manifest.as_deref().and_then(modified),
        cfg.embeddings.as_deref().and_then(modified),
    ];
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<(usize, usize), String>> = pool.install(|| {
        records
            .par_iter()
            .map(|r| featurize_record(r, cfg, &kinds, table.as_ref(), &text_sources))
            .collect()
    });
    let mut summary = FeaturizeSummary::default();
    for (rec, res) in records.iter().zip(results) {
        match res {
            Ok((w, u)) => {
                summary.written += w;
                summary.up_to_date += u;
            }
            Err(msg) => {
                warn!("skipping '{}': {msg}", rec.id);
                summary.failed.push((rec.id.clone(), msg));
            }
        }
    }
    info!("{}", summary.line());
    if cfg.strict && !summary.failed.is_empty() {
        return Err(CliError::Data(format!(
            "{} utterances failed to featurize (first: '{}': {})",
            summary.failed.len(),
            summary.failed[0].0,
            summary.failed[0].1
        )));
    }
    Ok(summary)
}

fn list_ids(ids: &[&str]) -> String {
    const SHOWN: usize = 10;
    let mut s = ids.iter().take(SHOWN).copied().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        s.push_str(&format!(", … ({} more)", ids.len() - SHOWN));
    }
    s
}

/// Read the cached `kinds` for every record.
pub fn load_features(cfg: &RunConfig, records: &[UtteranceRecord], kinds: &[FeatureKind]) -> Result<Vec<FeatureSet>, CliError> {
    for &kind in kinds {
        let missing: Vec<&str> = records
            .iter()
            .filter(|r| !cache_path(&cfg.cache_dir, &r.id, kind).is_file())
            .map(|r| r.id.as_str())
            .collect();
        if missing.len() == records.len() {
            return Err(CliError::Data(format!(
                "missing feature kind: {} (no cache files in {}; run featurize first)",
                kind.name(),
                cfg.cache_dir.display()
            )));
        }
        if !missing.is_empty() {
            return Err(CliError::Data(format!(
                "missing {} cache for {} utterances: {}",
                kind.name(),
                missing.len(),
                list_ids(&missing)
            )));
        }
    }
    records
        .par_iter()
        .map(|r| {
            let mut set = FeatureSet::default();
            for &kind in kinds {
                set.set(kind, read_sert(&cache_path(&cfg.cache_dir, &r.id, kind))?);
            }
            Ok(set)
        })
        .collect::<Result<Vec<_>, ser_forge_core::Error>>()
        .map_err(CliError::from)
}

fn labels_of(records: &[UtteranceRecord]) -> Vec<EmotionLabel> {
    records.iter().map(|r| r.label.expect("selected records are labelled")).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub history: TrainHistory,
}

/// Train one model on every selected record; write the checkpoint and the
/// per-epoch loss log.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let records = load_records(cfg)?;
    let variant = cfg.model.variant;
    let sets = load_features(cfg, &records, variant.required_features())?;
    let refs: Vec<&FeatureSet> = sets.iter().collect();
    let labels = labels_of(&records);
    let mut graph = ModelGraph::<f32>::build(cfg.model.clone(), &mut seed_rng(cfg.train.seed))?;
    let history = train_model(&mut graph, &refs, &labels, &cfg.train)?;
    fs::create_dir_all(&cfg.checkpoint_dir).map_err(|e| io_error(&cfg.checkpoint_dir, e))?;
    let checkpoint = cfg.checkpoint_dir.join(format!("{}.serm", variant.name()));
    graph.to_checkpoint(true).write(&checkpoint)?;
    let loss_log = cfg.checkpoint_dir.join(format!("{}.loss.csv", variant.name()));
    fs::write(&loss_log, history.to_csv()).map_err(|e| io_error(&loss_log, e))?;
    Ok(TrainOutcome {
        checkpoint,
        loss_log,
        history,
    })
}

/// Stratified k-fold cross-validation; the JSON report goes to
/// [`RunConfig::report_path`].
pub fn cmd_xval(cfg: &RunConfig) -> Result<EvalReport, CliError> {
    let records = load_records(cfg)?;
    let variant = cfg.model.variant;
    let sets = load_features(cfg, &records, variant.required_features())?;
    let refs: Vec<&FeatureSet> = sets.iter().collect();
    let labels = labels_of(&records);
    let report = cross_validate(&refs, &labels, &cfg.model, &cfg.train, cfg.k)?;
    let path = cfg.report_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(&path, report.to_json() + "\n").map_err(|e| io_error(&path, e))?;
    info!("report written to {}", path.display());
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub variant: ModelVariant,
    pub label: EmotionLabel,
    pub probabilities: [f64; EmotionLabel::COUNT],
}

impl Prediction {
    pub fn render(&self) -> String {
        let mut s = format!("label: {}\n", self.label);
        for (l, p) in EmotionLabel::ALL.iter().zip(self.probabilities) {
            s.push_str(&format!("{:<10} {p:.6}\n", l.name()));
        }
        s
    }
}

/// Classify one utterance with a trained checkpoint.
pub fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    wav: Option<&Path>,
    transcript: Option<&str>,
) -> Result<Prediction, CliError> {
    let ckpt = Checkpoint::read(checkpoint)?;
    let mut graph = ModelGraph::<f32>::from_checkpoint(&ckpt)?;
    let variant = graph.variant();
    let kinds = variant.required_features();
    let needs_audio = kinds.iter().any(|&k| k != FeatureKind::Text);
    if variant.uses_text() && transcript.is_none() {
        return Err(CliError::Usage(format!("model {variant} reads text; pass --transcript")));
    }
    if needs_audio && wav.is_none() {
        return Err(CliError::Usage(format!("model {variant} reads audio; pass --wav")));
    }
    let table = if variant.uses_text() {
        Some(load_table(cfg)?.ok_or_else(|| {
            CliError::Usage(format!("model {variant} reads text; pass --embeddings"))
        })?)
    } else {
        None
    };
    let signal = match wav.filter(|_| needs_audio) {
        Some(p) => Some(decode_wav(p)?),
        None => None,
    };
    let set = featurize(signal.as_ref(), transcript.unwrap_or(""), kinds, &cfg.dsp, table.as_ref())?;
    let inputs = ModelInputs::from_features(&[&set], kinds)?;
    let probs = softmax(&graph.predict(&inputs)?)?;
    let row = probs.data();
    let label = EmotionLabel::from_index(argmax(row))
        .ok_or_else(|| CliError::Data("checkpoint does not have 4 classes".into()))?;
    let mut probabilities = [0.0; EmotionLabel::COUNT];
    for (p, &v) in probabilities.iter_mut().zip(row) {
        *p = v as f64;
    }
    Ok(Prediction {
        variant,
        label,
        probabilities,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOutcome {
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.checked > 0 && r.max_rel_error <= GRADCHECK_TOLERANCE)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let verdict = if r.checked > 0 && r.max_rel_error <= GRADCHECK_TOLERANCE {
                "ok"
            } else {
                "FAIL"
            };
            s.push_str(&format!(
                "{:<24} {:>5} coords  max rel err {:.3e}  {verdict}\n",
                r.name, r.checked, r.max_rel_error
            ));
        }
        s
    }
}

/// Finite-difference checks of every layer type and of each model variant
/// (reduced scale, double precision).
pub fn cmd_gradcheck(variant: Option<ModelVariant>, seed: u64, coords: usize) -> Result<GradcheckOutcome, CliError> {
    let mut rows = Vec::new();
    for (name, r) in layer_checks(&mut seed_rng(seed))? {
        rows.push(GradcheckRow {
            name: name.to_string(),
            checked: r.checked,
            max_rel_error: r.max_rel_error,
        });
    }
    let variants: Vec<ModelVariant> = match variant {
        Some(v) => vec![v],
        None => ModelVariant::ALL.to_vec(),
    };
    for v in variants {
        let r = gradient_check(v, seed, coords)?;
        rows.push(GradcheckRow {
            name: format!("model {v}"),
            checked: r.checked,
            max_rel_error: r.max_rel_error,
        });
    }
    Ok(GradcheckOutcome { rows })
}
