//! Ranking and classification metrics.
//!
//! Ranking metrics take a recommended id list (best first) and the set of
//! held-out target items. Classification metrics accumulate a confusion
//! count per class; balanced accuracy is the mean of per-class recalls, so a
//! majority-class predictor on an imbalanced binary problem scores 0.5.

use std::collections::HashSet;

use crate::error::{Error, Result};

/// Denominator convention for recall@k.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecallDenominator {
    /// `min(k, |targets|)`: a full top-k of hits scores 1 even when the user
    /// has more targets than k. The default everywhere in this crate.
    CappedAtK,
    /// Plain `|targets|`.
    TargetCount,
}

/// Fraction of the top-`k` recommendations that hit the target set, with the
/// denominator chosen by `denom`. Targets must be non-empty (evaluation
/// skips users without held-out items before calling this).
pub fn recall_at_k(
    recommended: &[u32],
    targets: &HashSet<u32>,
    k: usize,
    denom: RecallDenominator,
) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Data("recall@k undefined for empty target set".into()));
    }
    if k == 0 {
        return Err(Error::Contract("recall@k needs k >= 1".into()));
    }
    let hits = recommended.iter().take(k).filter(|i| targets.contains(i)).count();
    let d = match denom {
        RecallDenominator::CappedAtK => k.min(targets.len()),
        RecallDenominator::TargetCount => targets.len(),
    };
    Ok(hits as f64 / d as f64)
}

/// Binary-relevance NDCG@k: positions are discounted by `log2(pos + 1)`
/// (1-indexed), and the ideal ranking places one target at each of the first
/// `min(k, |targets|)` positions.
pub fn ndcg_at_k(recommended: &[u32], targets: &HashSet<u32>, k: usize) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Data("ndcg@k undefined for empty target set".into()));
    }
    if k == 0 {
        return Err(Error::Contract("ndcg@k needs k >= 1".into()));
    }
    let dcg: f64 = recommended
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| targets.contains(i))
        .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..k.min(targets.len())).map(|pos| 1.0 / ((pos + 2) as f64).log2()).sum();
    Ok(dcg / ideal)
}

/// Per-class correct/total counts for accuracy-style metrics.
#[derive(Clone, Debug, Default)]
pub struct ConfusionCounts {
    correct: Vec<u64>,
    total: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(n_classes: usize) -> Self {
        ConfusionCounts { correct: vec![0; n_classes], total: vec![0; n_classes] }
    }

    pub fn observe(&mut self, label: usize, prediction: usize) {
        self.total[label] += 1;
        if label == prediction {
            self.correct[label] += 1;
        }
    }

    pub fn observe_all(&mut self, labels: &[usize], predictions: &[usize]) -> Result<()> {
        if labels.len() != predictions.len() {
            return Err(Error::Contract(format!(
                "{} labels vs {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        for (&l, &p) in labels.iter().zip(predictions) {
            self.observe(l, p);
        }
        Ok(())
    }

    pub fn n_observed(&self) -> u64 {
        self.total.iter().sum()
    }

    /// Plain accuracy over all observations.
    pub fn accuracy(&self) -> Result<f64> {
        let n = self.n_observed();
        if n == 0 {
            return Err(Error::Data("accuracy undefined without observations".into()));
        }
        Ok(self.correct.iter().sum::<u64>() as f64 / n as f64)
    }

    /// Mean of per-class recalls. Every class must have been observed at
    /// least once, otherwise its recall is undefined.
    pub fn balanced_accuracy(&self) -> Result<f64> {
        if self.total.iter().any(|&t| t == 0) {
            return Err(Error::Data("balanced accuracy undefined: a class has no observations".into()));
        }
        let sum: f64 = self.correct.iter().zip(&self.total).map(|(&c, &t)| c as f64 / t as f64).sum();
        Ok(sum / self.total.len() as f64)
    }
}

/// Mean of a metric over users; empty input is a data error so silent
/// averaging over nothing cannot masquerade as a score.
pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Data("mean of empty metric vector".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}
