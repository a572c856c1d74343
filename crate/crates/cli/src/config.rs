//! Run configuration: built-in defaults, then a `key = value` file, then
//! command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ser_forge_core::dsp::{DspConfig, WindowKind};
use ser_forge_core::featurize::FeatureKind;
use ser_forge_core::models::{ModelConfig, ModelVariant};
use ser_forge_core::train::TrainConfig;

use crate::error::CliError;

/// Every key a config file or flag may set.
pub const KEYS: &[&str] = &[
    // paths and run control
    "manifest",
    "embeddings",
    "embedding_dim",
    "cache_dir",
    "checkpoint_dir",
    "report_path",
    "kinds",
    "k",
    "force",
    "strict",
    "filter",
    // dsp
    "sample_rate",
    "n_fft",
    "hop",
    "window",
    "n_mels",
    "n_mfcc",
    "fmin",
    "fmax",
    // model
    "variant",
    "text_filters_per_size",
    "text_kernel_heights",
    "text_fc_size",
    "dropout",
    "spec_kernels",
    "mfcc_kernels",
    "kernels_per_path",
    "fc0",
    "fc1",
    "classes",
    "spec_shape",
    "mfcc_shape",
    "text_shape",
    // training
    "epochs",
    "batch_size",
    "seed",
    "early_stop_patience",
    "target_accuracy",
    "deterministic",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub embedding_dim: usize,
    pub cache_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Defaults to `<checkpoint_dir>/<variant>.xval.json`.
    pub report_path: Option<PathBuf>,
    /// Feature kinds to extract; `None` means every audio kind plus text
    /// when an embedding table is configured.
    pub kinds: Option<Vec<FeatureKind>>,
    pub k: usize,
    pub force: bool,
    pub strict: bool,
    /// Keep only improvised utterances with annotator agreement.
    pub filter: bool,
    pub dsp: DspConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            embeddings: None,
            embedding_dim: 300,
            cache_dir: PathBuf::from("features"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            report_path: None,
            kinds: None,
            k: 5,
            force: false,
            strict: false,
            filter: false,
            dsp: DspConfig::default(),
            model: ModelConfig::new(ModelVariant::M4cTextMfcc),
            train: TrainConfig::default(),
        }
    }
}

/// Parse `key = value` lines. `#` starts a comment; blank lines are ignored.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("config line {}: expected `key = value`, got '{line}'", i + 1))
        })?;
        let key = key.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!("config line {}: unknown key '{key}'", i + 1)));
        }
        pairs.push((key, value.trim().to_string()));
    }
    Ok(pairs)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_text(&text)
}

fn bad(key: &str, value: &str, what: &str) -> CliError {
    CliError::Usage(format!("{key} = '{value}': expected {what}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| bad(key, value, "a number"))
}

fn boolean(key: &str, value: &str) -> Result<bool, CliError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn pair(key: &str, value: &str) -> Result<(usize, usize), CliError> {
    let (a, b) = value.split_once('x').ok_or_else(|| bad(key, value, "HxW"))?;
    Ok((num(key, a.trim())?, num(key, b.trim())?))
}

fn list<T>(value: &str, item: impl Fn(&str) -> Result<T, CliError>) -> Result<Vec<T>, CliError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(item)
        .collect()
}

fn show_pairs(v: &[(usize, usize)]) -> String {
    v.iter().map(|(a, b)| format!("{a}x{b}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Merge defaults, file pairs and flag pairs (later wins). The model
    /// defaults depend on the variant, so it is resolved first.
    pub fn resolve(file: &[(String, String)], flags: &[(String, String)]) -> Result<Self, CliError> {
        let mut merged: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in file.iter().chain(flags) {
            if !KEYS.contains(&k.as_str()) {
                return Err(CliError::Usage(format!("unknown key '{k}'")));
            }
            merged.insert(k, v);
        }
        let mut cfg = RunConfig::default();
        if let Some(v) = merged.get("variant") {
            let variant: ModelVariant = v.parse().map_err(|e| CliError::Usage(format!("{e}")))?;
            cfg.model = ModelConfig::new(variant);
        }
        for (&key, &value) in &merged {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let path = || (!value.is_empty()).then(|| PathBuf::from(value));
        match key {
            "manifest" => self.manifest = path(),
            "embeddings" => self.embeddings = path(),
            "embedding_dim" => self.embedding_dim = num(key, value)?,
            "cache_dir" => self.cache_dir = PathBuf::from(value),
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(value),
            "report_path" => self.report_path = path(),
            "kinds" => {
                let kinds = list(value, |s| {
                    FeatureKind::parse(s).map_err(|e| CliError::Usage(e.to_string()))
                })?;
                self.kinds = (!kinds.is_empty()).then_some(kinds);
            }
            "k" => self.k = num(key, value)?,
            "force" => self.force = boolean(key, value)?,
            "strict" => self.strict = boolean(key, value)?,
            "filter" => self.filter = boolean(key, value)?,
            "sample_rate" => self.dsp.sample_rate = num(key, value)?,
            "n_fft" => self.dsp.n_fft = num(key, value)?,
            "hop" => self.dsp.hop = num(key, value)?,
            "window" => {
                self.dsp.window = match value.to_ascii_lowercase().as_str() {
                    "hann" => WindowKind::Hann,
                    _ => return Err(bad(key, value, "hann")),
                }
            }
            "n_mels" => self.dsp.n_mels = num(key, value)?,
            "n_mfcc" => self.dsp.n_mfcc = num(key, value)?,
            "fmin" => self.dsp.fmin = num(key, value)?,
            "fmax" => self.dsp.fmax = num(key, value)?,
            "variant" => {}
            "text_filters_per_size" => self.model.text_filters_per_size = num(key, value)?,
            "text_kernel_heights" => self.model.text_kernel_heights = list(value, |s| num(key, s))?,
            "text_fc_size" => self.model.text_fc_size = num(key, value)?,
            "dropout" => self.model.dropout_rate = num(key, value)?,
            "spec_kernels" => self.model.spec_kernels = list(value, |s| pair(key, s))?,
            "mfcc_kernels" => self.model.mfcc_kernels = list(value, |s| pair(key, s))?,
            "kernels_per_path" => self.model.kernels_per_path = num(key, value)?,
            "fc0" => self.model.fc_sizes.0 = num(key, value)?,
            "fc1" => self.model.fc_sizes.1 = num(key, value)?,
            "classes" => self.model.classes = num(key, value)?,
            "spec_shape" => self.model.spec_shape = pair(key, value)?,
            "mfcc_shape" => self.model.mfcc_shape = pair(key, value)?,
            "text_shape" => self.model.text_shape = pair(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "early_stop_patience" => {
                let p: usize = num(key, value)?;
                self.train.early_stop_patience = (p > 0).then_some(p);
            }
            "target_accuracy" => {
                self.train.target_accuracy = match value {
                    "" | "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "deterministic" => self.train.deterministic = boolean(key, value)?,
            other => return Err(CliError::Usage(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: ser_forge_core::Error| CliError::Usage(e.to_string());
        self.dsp.validate().map_err(usage)?;
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        if self.model.classes != 4 {
            return Err(CliError::Usage(format!(
                "classes = {}: the label set has exactly 4 classes",
                self.model.classes
            )));
        }
        if self.k < 2 {
            return Err(CliError::Usage(format!("k = {}: need at least 2 folds", self.k)));
        }
        if self.embedding_dim == 0 {
            return Err(CliError::Usage("embedding_dim must be positive".into()));
        }
        Ok(())
    }

    /// Feature kinds `featurize` should produce.
    pub fn feature_kinds(&self) -> Vec<FeatureKind> {
        match &self.kinds {
            Some(k) => k.clone(),
            None => FeatureKind::ALL
                .into_iter()
                .filter(|&k| k != FeatureKind::Text || self.embeddings.is_some())
                .collect(),
        }
    }

    pub fn report_path(&self) -> PathBuf {
        self.report_path.clone().unwrap_or_else(|| {
            self.checkpoint_dir
                .join(format!("{}.xval.json", self.model.variant.name()))
        })
    }

    /// The fully resolved configuration in config-file syntax.
    pub fn render(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let m = &self.model;
        let t = &self.train;
        let d = &self.dsp;
        let kinds = self
            .feature_kinds()
            .iter()
            .map(|k| k.name())
            .collect::<Vec<_>>()
            .join(",");
        let heights = m
            .text_kernel_heights
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let rows: Vec<(&str, String)> = vec![
            ("manifest", opt(&self.manifest)),
            ("embeddings", opt(&self.embeddings)),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("cache_dir", self.cache_dir.display().to_string()),
            ("checkpoint_dir", self.checkpoint_dir.display().to_string()),
            ("report_path", self.report_path().display().to_string()),
            ("kinds", kinds),
            ("k", self.k.to_string()),
            ("force", self.force.to_string()),
            ("strict", self.strict.to_string()),
            ("filter", self.filter.to_string()),
            ("sample_rate", d.sample_rate.to_string()),
            ("n_fft", d.n_fft.to_string()),
            ("hop", d.hop.to_string()),
            ("window", "hann".to_string()),
            ("n_mels", d.n_mels.to_string()),
            ("n_mfcc", d.n_mfcc.to_string()),
            ("fmin", d.fmin.to_string()),
            ("fmax", d.fmax.to_string()),
            ("variant", m.variant.name().to_string()),
            ("text_filters_per_size", m.text_filters_per_size.to_string()),
            ("text_kernel_heights", heights),
            ("text_fc_size", m.text_fc_size.to_string()),
            ("dropout", m.dropout_rate.to_string()),
            ("spec_kernels", show_pairs(&m.spec_kernels)),
            ("mfcc_kernels", show_pairs(&m.mfcc_kernels)),
            ("kernels_per_path", m.kernels_per_path.to_string()),
            ("fc0", m.fc_sizes.0.to_string()),
            ("fc1", m.fc_sizes.1.to_string()),
            ("classes", m.classes.to_string()),
            ("spec_shape", show_pairs(&[m.spec_shape])),
            ("mfcc_shape", show_pairs(&[m.mfcc_shape])),
            ("text_shape", show_pairs(&[m.text_shape])),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seed", t.seed.to_string()),
            ("early_stop_patience", t.early_stop_patience.unwrap_or(0).to_string()),
            (
                "target_accuracy",
                t.target_accuracy.map_or("none".to_string(), |a| a.to_string()),
            ),
            ("deterministic", t.deterministic.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
