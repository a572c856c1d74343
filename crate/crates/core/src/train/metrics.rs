use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::EmotionLabel;
use crate::error::{Error, Result};

const K: usize = EmotionLabel::COUNT;

/// Raw prediction counts, `counts[true][predicted]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts(pub [[u64; K]; K]);

impl ConfusionCounts {
    pub fn tally(truth: &[EmotionLabel], predicted: &[EmotionLabel]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::invalid(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut c = Self::default();
        for (t, p) in truth.iter().zip(predicted) {
            c.0[t.index()][p.index()] += 1;
        }
        Ok(c)
    }

    pub fn add(&mut self, other: &Self) {
        for (row, orow) in self.0.iter_mut().zip(&other.0) {
            for (a, b) in row.iter_mut().zip(orow) {
                *a += b;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..K).map(|i| self.0[i][i]).sum()
    }

    /// Overall accuracy, class accuracy and row-percentage confusion.
    pub fn metrics(&self) -> Result<FoldMetrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::invalid("cannot score an empty prediction set"));
        }
        let mut confusion = [[0.0; K]; K];
        let mut recalls = Vec::with_capacity(K);
        for (c, row) in self.0.iter().enumerate() {
            let n: u64 = row.iter().sum();
            if n == 0 {
                warn!(
                    "class {} has no examples; excluded from class accuracy",
                    EmotionLabel::ALL[c]
                );
                continue;
            }
            for (p, &v) in row.iter().enumerate() {
                confusion[c][p] = 100.0 * v as f64 / n as f64;
            }
            recalls.push(row[c] as f64 / n as f64);
        }
        Ok(FoldMetrics {
            overall_accuracy: self.correct() as f64 / total as f64,
            class_accuracy: recalls.iter().sum::<f64>() / recalls.len() as f64,
            confusion,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub overall_accuracy: f64,
    /// Mean per-class recall over the classes present.
    pub class_accuracy: f64,
    /// Row `c`: percentage of class-`c` examples predicted as each class.
    pub confusion: [[f64; K]; K],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub class_accuracy: f64,
    pub confusion: [[f64; K]; K],
    pub per_fold: Vec<FoldMetrics>,
    pub n_examples: u64,
}

impl EvalReport {
    /// Aggregate over folds by summing raw counts before normalizing.
    pub fn from_folds(folds: &[ConfusionCounts]) -> Result<Self> {
        let mut total = ConfusionCounts::default();
        for f in folds {
            total.add(f);
        }
        let m = total.metrics()?;
        let per_fold = if folds.len() > 1 {
            folds.iter().map(ConfusionCounts::metrics).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            overall_accuracy: m.overall_accuracy,
            class_accuracy: m.class_accuracy,
            confusion: m.confusion,
            per_fold,
            n_examples: total.total(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("evaluation report", e.to_string()))
    }
}

/// Score predictions against the truth.
pub fn evaluate_predictions(truth: &[EmotionLabel], predicted: &[EmotionLabel]) -> Result<EvalReport> {
    EvalReport::from_folds(&[ConfusionCounts::tally(truth, predicted)?])
}

/// Plain-text summary: accuracies, then the percentage confusion matrix.
pub fn render_report(title: &str, report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = writeln!(s, "{:<22}{:>10}{:>10}", "", "Overall", "Class");
    let _ = writeln!(
        s,
        "{:<22}{:>9.1}%{:>9.1}%",
        format!("all ({} utterances)", report.n_examples),
        100.0 * report.overall_accuracy,
        100.0 * report.class_accuracy
    );
    for (i, f) in report.per_fold.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:<22}{:>9.1}%{:>9.1}%",
            format!("fold {}", i + 1),
            100.0 * f.overall_accuracy,
            100.0 * f.class_accuracy
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Confusion matrix (%), rows = true class");
    let _ = write!(s, "{:<12}", "");
    for l in EmotionLabel::ALL {
        let _ = write!(s, "{:>11}", l.name());
    }
    let _ = writeln!(s);
    for (l, row) in EmotionLabel::ALL.iter().zip(&report.confusion) {
        let _ = write!(s, "{:<12}", l.name());
        for v in row {
            let _ = write!(s, "{v:>11.2}");
        }
        let _ = writeln!(s);
    }
    s
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
