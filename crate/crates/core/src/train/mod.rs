//! Minibatch training, evaluation and stratified cross-validation.

mod metrics;

use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{stratify_labels, EmotionLabel};
use crate::error::{Error, Result};
use crate::featurize::FeatureSet;
use crate::models::{ModelConfig, ModelGraph, ModelInputs};
use crate::nn::{seed_rng, softmax_cross_entropy, Adadelta, LayerMode, Tape};
use crate::tensor::Tensor;

pub use metrics::{argmax, evaluate_predictions, render_report, ConfusionCounts, EvalReport, FoldMetrics};

/// Stream separation between weight initialization and training randomness.
const TRAIN_STREAM: u64 = 0x5DEE_CE66_D1CE_5EED;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many epochs without a lower training loss.
    pub early_stop_patience: Option<usize>,
    /// Stop once an epoch's training accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Run cross-validation folds one after another instead of in parallel.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            seed: 0,
            early_stop_patience: Some(10),
            target_accuracy: None,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(format!(
                "batch size must be at least 2 for batch normalization, got {}",
                self.batch_size
            )));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::invalid("early-stop patience must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Example-weighted mean cross-entropy over the epoch.
    pub loss: f64,
    /// Accuracy of the training-mode predictions made during the epoch.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_accuracy\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.train_accuracy));
        }
        s
    }
}

/// Split shuffled indices into batches. A trailing batch of one would break
/// batch normalization, so it joins the batch before it.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

fn check_examples(features: &[&FeatureSet], labels: &[EmotionLabel]) -> Result<()> {
    if features.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} feature sets but {} labels",
            features.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Train `graph` in place with Adadelta on softmax cross-entropy.
pub fn train_model(
    graph: &mut ModelGraph<f32>,
    features: &[&FeatureSet],
    labels: &[EmotionLabel],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    check_examples(features, labels)?;
    if features.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 training examples, got {}",
            features.len()
        )));
    }
    let kinds = graph.variant().required_features();
    let optimizer = Adadelta::default();
    let mut rng = seed_rng(config.seed ^ TRAIN_STREAM);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut history = TrainHistory::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in batches(&order, config.batch_size).into_iter().enumerate() {
            let sets: Vec<&FeatureSet> = batch.iter().map(|&i| features[i]).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i].index()).collect();
            let inputs = ModelInputs::from_features(&sets, kinds)?;
            let mut tape = Tape::new(LayerMode::Train);
            let logits = graph.forward(&mut tape, &inputs, &mut rng)?;
            let ce = softmax_cross_entropy(tape.value(logits), &targets)?;
            let loss = ce.loss as f64;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            loss_sum += loss * batch.len() as f64;
            let c = graph.config().classes;
            correct += ce
                .probs
                .data()
                .chunks(c)
                .zip(&targets)
                .filter(|(row, &t)| argmax(row) == t)
                .count();
            tape.backward(logits, ce.grad, graph.params_mut())?;
            optimizer.step(graph.params_mut()).map_err(|e| match e {
                Error::Numerical(msg) => {
                    Error::Numerical(format!("{msg} at epoch {epoch}, batch {}", b + 1))
                }
                other => other,
            })?;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / features.len() as f64,
            train_accuracy: correct as f64 / features.len() as f64,
        };
        debug!(
            "epoch {epoch}: loss {:.5} train accuracy {:.4}",
            stats.loss, stats.train_accuracy
        );
        history.epochs.push(stats);

        if config.target_accuracy.is_some_and(|t| stats.train_accuracy >= t) {
            break;
        }
        if stats.loss < best {
            best = stats.loss;
            stale = 0;
        } else {
            stale += 1;
            if config.early_stop_patience.is_some_and(|p| stale >= p) {
                info!("early stop after epoch {epoch}: no loss improvement in {stale} epochs");
                break;
            }
        }
    }
    Ok(history)
}

/// Eval-mode class probabilities, `N×classes`, computed in chunks.
pub fn predict_proba(
    graph: &mut ModelGraph<f32>,
    features: &[&FeatureSet],
    batch_size: usize,
) -> Result<Tensor<f32>> {
    let kinds = graph.variant().required_features();
    let c = graph.config().classes;
    let mut probs = Vec::with_capacity(features.len() * c);
    for chunk in features.chunks(batch_size.max(1)) {
        let inputs = ModelInputs::from_features(chunk, kinds)?;
        let p = crate::nn::softmax(&graph.predict(&inputs)?)?;
        probs.extend_from_slice(p.data());
    }
    Tensor::new(vec![features.len(), c], probs)
}

/// Argmax class of each example.
pub fn predict_labels(
    graph: &mut ModelGraph<f32>,
    features: &[&FeatureSet],
    batch_size: usize,
) -> Result<Vec<EmotionLabel>> {
    let c = graph.config().classes;
    let p = predict_proba(graph, features, batch_size)?;
    p.data()
        .chunks(c)
        .map(|row| {
            EmotionLabel::from_index(argmax(row))
                .ok_or_else(|| Error::invalid(format!("model has {c} classes, expected 4")))
        })
        .collect()
}

pub fn evaluate(
    graph: &mut ModelGraph<f32>,
    features: &[&FeatureSet],
    labels: &[EmotionLabel],
    batch_size: usize,
) -> Result<EvalReport> {
    check_examples(features, labels)?;
    let predicted = predict_labels(graph, features, batch_size)?;
    evaluate_predictions(labels, &predicted)
}

/// Stratified `k`-fold cross-validation around an arbitrary learner.
///
/// `fit_predict(fold, train_idx, test_idx)` returns one predicted label per
/// test index. Counts from all folds are pooled before normalizing.
pub fn cross_validate_with<F>(
    labels: &[EmotionLabel],
    k: usize,
    seed: u64,
    deterministic: bool,
    fit_predict: F,
) -> Result<EvalReport>
where
    F: Fn(usize, &[usize], &[usize]) -> Result<Vec<EmotionLabel>> + Sync,
{
    let assignment = stratify_labels(labels, k, seed)?;
    let run_fold = |fold: usize| -> Result<ConfusionCounts> {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, &f) in assignment.iter().enumerate() {
            if f == fold {
                test.push(i)
            } else {
                train.push(i)
            }
        }
        let predicted = fit_predict(fold, &train, &test)?;
        let truth: Vec<EmotionLabel> = test.iter().map(|&i| labels[i]).collect();
        ConfusionCounts::tally(&truth, &predicted)
    };
    let counts: Vec<ConfusionCounts> = if deterministic {
        (0..k).map(run_fold).collect::<Result<_>>()?
    } else {
        (0..k).into_par_iter().map(run_fold).collect::<Result<_>>()?
    };
    EvalReport::from_folds(&counts)
}

/// Cross-validate a model variant. Fold `f` initializes and trains with
/// seed `config.seed + f`.
pub fn cross_validate(
    features: &[&FeatureSet],
    labels: &[EmotionLabel],
    model: &ModelConfig,
    config: &TrainConfig,
    k: usize,
) -> Result<EvalReport> {
    config.validate()?;
    model.validate()?;
    check_examples(features, labels)?;
    cross_validate_with(labels, k, config.seed, config.deterministic, |fold, train, test| {
        let fold_seed = config.seed.wrapping_add(fold as u64);
        let mut graph = ModelGraph::<f32>::build(model.clone(), &mut seed_rng(fold_seed))?;
        let train_sets: Vec<&FeatureSet> = train.iter().map(|&i| features[i]).collect();
        let train_labels: Vec<EmotionLabel> = train.iter().map(|&i| labels[i]).collect();
        let fold_config = TrainConfig {
            seed: fold_seed,
            ..config.clone()
        };
        let history = train_model(&mut graph, &train_sets, &train_labels, &fold_config)?;
        let test_sets: Vec<&FeatureSet> = test.iter().map(|&i| features[i]).collect();
        let predicted = predict_labels(&mut graph, &test_sets, config.batch_size)?;
        if let Some(last) = history.last() {
            info!(
                "{} fold {}: {} epochs, final loss {:.4}, train accuracy {:.3}",
                model.variant,
                fold + 1,
                last.epoch,
                last.loss,
                last.train_accuracy
            );
        }
        Ok(predicted)
    })
}
