use serde::{Deserialize, Serialize};

use super::EvalError;

/// Decision threshold on the positive-class probability.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// How per-class recalls are combined by [`weighted_accuracy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyWeighting {
    /// Mean of per-class recalls.
    #[default]
    Balanced,
    /// Recalls weighted by class frequency (plain accuracy).
    Frequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub auc: f64,
    pub f_score: f64,
    pub weighted_accuracy: f64,
}

impl MetricSet {
    /// Metrics of positive-class probabilities against binary labels.
    pub fn from_probabilities(probs: &[f64], labels: &[bool], weighting: AccuracyWeighting) -> Result<Self, EvalError> {
        let preds: Vec<bool> = probs.iter().map(|&p| p >= DECISION_THRESHOLD).collect();
        Ok(Self {
            auc: auc(probs, labels)?,
            f_score: f_score(&preds, labels)?,
            weighted_accuracy: weighted_accuracy(&preds, labels, weighting)?,
        })
    }
}

fn check_len(a: usize, b: usize) -> Result<(), EvalError> {
    if a != b {
        return Err(EvalError::LengthMismatch(a, b));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from midranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_len(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::NonFinite);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps midranks integral.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank2 = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum2 += midrank2;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// F1 of the positive class; zero when nothing is predicted positive.
pub fn f_score(predictions: &[bool], labels: &[bool]) -> Result<f64, EvalError> {
    check_len(predictions.len(), labels.len())?;
    let tp = predictions.iter().zip(labels).filter(|(&p, &l)| p && l).count();
    let fp = predictions.iter().zip(labels).filter(|(&p, &l)| p && !l).count();
    let fn_ = predictions.iter().zip(labels).filter(|(&p, &l)| !p && l).count();
    if tp + fp == 0 || tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

pub fn weighted_accuracy(
    predictions: &[bool],
    labels: &[bool],
    weighting: AccuracyWeighting,
) -> Result<f64, EvalError> {
    check_len(predictions.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let tp = predictions.iter().zip(labels).filter(|(&p, &l)| p && l).count();
    let tn = predictions.iter().zip(labels).filter(|(&p, &l)| !p && !l).count();
    Ok(match weighting {
        AccuracyWeighting::Balanced => (tp as f64 / n_pos as f64 + tn as f64 / n_neg as f64) / 2.0,
        AccuracyWeighting::Frequency => (tp + tn) as f64 / labels.len() as f64,
    })
}
