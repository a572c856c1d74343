//! `ser-forge` command-line front end: argument parsing, run configuration
//! and the five commands (featurize, train, xval, predict, gradcheck).

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::info;

use ser_forge_core::models::ModelVariant;
use ser_forge_core::train::render_report;

pub use commands::{
    cmd_featurize, cmd_gradcheck, cmd_predict, cmd_train, cmd_xval, FeaturizeSummary, GradcheckOutcome, Prediction,
    TrainOutcome,
};
pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ser-forge", version, about = "Speech emotion recognition from audio and transcripts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract features for every manifest record into the cache directory.
    Featurize(RunArgs),
    /// Train one model on the whole manifest and save a checkpoint.
    Train(RunArgs),
    /// Stratified k-fold cross-validation with a JSON report.
    Xval(RunArgs),
    /// Classify one utterance with a trained checkpoint.
    Predict(PredictArgs),
    /// Finite-difference gradient checks of every layer and model variant.
    Gradcheck(GradcheckArgs),
}

/// Flags shared by the data commands. Each overrides the matching key of
/// the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Where xval writes its JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// m1, m2a, m2b, m3, m4a, m4b or m4c.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Word-vector table in text word2vec format.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Comma-separated feature kinds to extract (spec, mfcc, spec_ds2, text).
    #[arg(long)]
    pub kinds: Option<String>,
    /// Recompute cache entries even when they are up to date.
    #[arg(long)]
    pub force: bool,
    /// Fail when any utterance cannot be featurized.
    #[arg(long)]
    pub strict: bool,
    /// Run cross-validation folds sequentially.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub wav: Option<PathBuf>,
    /// Transcript text; required for models that read text.
    #[arg(long)]
    pub transcript: Option<String>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Check only this variant (default: all seven).
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sampled parameter coordinates per model.
    #[arg(long, default_value_t = 40)]
    pub coords: usize,
}

impl RunArgs {
    /// Flag values as config pairs, in the order they override.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        put("manifest", path(&self.manifest));
        put("cache_dir", path(&self.cache_dir));
        put("checkpoint_dir", path(&self.checkpoint_dir));
        put("report_path", path(&self.report));
        put("variant", self.variant.clone());
        put("k", self.k.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("dropout", self.dropout.map(|v| v.to_string()));
        put("embeddings", path(&self.embeddings));
        put("kinds", self.kinds.clone());
        put("force", self.force.then(|| "true".into()));
        put("strict", self.strict.then(|| "true".into()));
        put("deterministic", self.deterministic.then(|| "true".into()));
        out
    }

    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let file = match &self.config {
            Some(p) => config::read_config_file(p)?,
            None => Vec::new(),
        };
        let cfg = RunConfig::resolve(&file, &self.to_pairs())?;
        info!("resolved configuration:\n{}", cfg.render());
        Ok(cfg)
    }
}

fn parse_variant(s: &str) -> Result<ModelVariant, CliError> {
    s.parse().map_err(|e: ser_forge_core::Error| CliError::Usage(e.to_string()))
}

/// Execute a parsed command; returns the text to print on success.
pub fn execute(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Featurize(a) => Ok(cmd_featurize(&a.resolve()?)?.line()),
        Command::Train(a) => {
            let out = cmd_train(&a.resolve()?)?;
            let last = out.history.last().expect("at least one epoch");
            Ok(format!(
                "trained {} epochs: loss {:.5}, train accuracy {:.4}\ncheckpoint: {}\nloss log: {}",
                last.epoch,
                last.loss,
                last.train_accuracy,
                out.checkpoint.display(),
                out.loss_log.display()
            ))
        }
        Command::Xval(a) => {
            let cfg = a.resolve()?;
            let report = cmd_xval(&cfg)?;
            let title = format!("{} {}-fold cross-validation", cfg.model.variant, cfg.k);
            Ok(format!(
                "{}\nreport: {}",
                render_report(&title, &report).trim_end(),
                cfg.report_path().display()
            ))
        }
        Command::Predict(a) => {
            let cfg = a.run.resolve()?;
            let p = cmd_predict(&cfg, &a.checkpoint, a.wav.as_deref(), a.transcript.as_deref())?;
            Ok(p.render().trim_end().to_string())
        }
        Command::Gradcheck(a) => {
            let variant = a.variant.as_deref().map(parse_variant).transpose()?;
            let out = cmd_gradcheck(variant, a.seed, a.coords)?;
            let text = out.render();
            if out.passed() {
                Ok(format!("{text}all gradient checks passed"))
            } else {
                print!("{text}");
                Err(CliError::Numerical(format!(
                    "gradient check above {:e}",
                    commands::GRADCHECK_TOLERANCE
                )))
            }
        }
    }
}

/// Parse `args`, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(text) => {
            println!("{text}");
            0
        }
        Err(e) => {
            eprintln!("ser-forge: {e}");
            e.exit_code()
        }
    }
}
