use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{EmotionLabel, UtteranceRecord};
use crate::error::{Error, Result};
use crate::nn::seed_rng;

/// Fold assignment for every record id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    /// Indices into `records` of the training and test sides of `fold`.
    pub fn split(&self, records: &[UtteranceRecord], fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, r) in records.iter().enumerate() {
            match self.fold_of(&r.id) {
                Some(f) if f == fold => test.push(i),
                Some(_) => train.push(i),
                None => {
                    return Err(Error::invalid(format!(
                        "record '{}' is not in the fold plan",
                        r.id
                    )))
                }
            }
        }
        Ok((train, test))
    }
}

/// Fold index for each label. Each class is shuffled on its own and dealt
/// round-robin; the dealing position carries over from one class to the
/// next so fold sizes also stay within one of each other.
pub fn stratify_labels(labels: &[EmotionLabel], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::invalid(format!("need k >= 2 folds, got {k}")));
    }
    let mut by_class: [Vec<usize>; EmotionLabel::COUNT] = Default::default();
    for (i, l) in labels.iter().enumerate() {
        by_class[l.index()].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(Error::invalid(format!(
                "class {} has {} members, fewer than k={k}",
                EmotionLabel::ALL[c],
                members.len()
            )));
        }
    }
    let mut rng = seed_rng(seed);
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(folds)
}

/// Stratified `k`-fold plan over labelled records.
pub fn stratified_kfold(records: &[UtteranceRecord], k: usize, seed: u64) -> Result<FoldPlan> {
    let labels = records
        .iter()
        .map(|r| {
            r.label
                .ok_or_else(|| Error::invalid(format!("record '{}' has no target label", r.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let folds = stratify_labels(&labels, k, seed)?;
    Ok(FoldPlan {
        k,
        assignments: records.iter().map(|r| r.id.clone()).zip(folds).collect(),
    })
}
