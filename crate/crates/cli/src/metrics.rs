//! Classification metrics: accuracy, F1 for the positive class, and AUC by
//! the rank statistic.

use serde::Serialize;
use voxreg_core::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    /// `None` (serialized as `null`) when only one class is present.
    pub auc: Option<f64>,
}

/// Computes all three metrics. `scores` are positive-class probabilities.
pub fn compute_metrics(preds: &[usize], labels: &[usize], scores: &[f64]) -> Result<Metrics> {
    if preds.is_empty() {
        return Err(Error::argument("metrics need at least one sample"));
    }
    if preds.len() != labels.len() || scores.len() != labels.len() {
        return Err(Error::argument(format!(
            "length mismatch: {} preds, {} labels, {} scores",
            preds.len(),
            labels.len(),
            scores.len()
        )));
    }
    if labels.iter().chain(preds.iter()).any(|&v| v > 1) {
        return Err(Error::argument("labels and predictions must be 0 or 1"));
    }
    let n = labels.len() as f64;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = correct as f64 / n;

    let tp = preds
        .iter()
        .zip(labels)
        .filter(|&(&p, &l)| p == 1 && l == 1)
        .count() as f64;
    let fp = preds
        .iter()
        .zip(labels)
        .filter(|&(&p, &l)| p == 1 && l == 0)
        .count() as f64;
    let fn_ = preds
        .iter()
        .zip(labels)
        .filter(|&(&p, &l)| p == 0 && l == 1)
        .count() as f64;
    let f1 = if 2.0 * tp + fp + fn_ == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    };

    Ok(Metrics {
        accuracy,
        f1,
        auc: auc_rank(labels, scores),
    })
}

/// Area under the ROC curve via the Mann-Whitney rank statistic; ties get
/// average ranks (each tied positive/negative pair counts one half).
pub fn auc_rank(labels: &[usize], scores: &[f64]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // average ranks over tie groups
    let mut ranks = vec![0.0; labels.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0; // 1-based
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force pairwise AUC used as the oracle for the rank statistic.
    fn auc_pairwise(labels: &[usize], scores: &[f64]) -> Option<f64> {
        let pos: Vec<f64> = labels
            .iter()
            .zip(scores)
            .filter(|(&l, _)| l == 1)
            .map(|(_, &s)| s)
            .collect();
        let neg: Vec<f64> = labels
            .iter()
            .zip(scores)
            .filter(|(&l, _)| l == 0)
            .map(|(_, &s)| s)
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut acc = 0.0;
        for &p in &pos {
            for &q in &neg {
                acc += if p > q {
                    1.0
                } else if p == q {
                    0.5
                } else {
                    0.0
                };
            }
        }
        Some(acc / (pos.len() * neg.len()) as f64)
    }

    #[test]
    fn perfect_classifier() {
        let labels = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let preds = labels.clone();
        let scores: Vec<f64> = labels.iter().map(|&l| l as f64 * 0.8 + 0.1).collect();
        let m = compute_metrics(&preds, &labels, &scores).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.auc, Some(1.0));
    }

    #[test]
    fn all_positive_predictions_on_balanced_labels() {
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let preds = vec![1; 8];
        let scores = vec![0.7; 8];
        let m = compute_metrics(&preds, &labels, &scores).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.auc, Some(0.5)); // all-tied scores
    }

    #[test]
    fn two_sample_exact() {
        let m = compute_metrics(&[0, 1], &[0, 1], &[0.2, 0.9]).unwrap();
        assert_eq!(
            m,
            Metrics {
                accuracy: 1.0,
                f1: 1.0,
                auc: Some(1.0)
            }
        );
    }

    #[test]
    fn empty_input_rejected() {
        assert!(compute_metrics(&[], &[], &[]).is_err());
    }

    #[test]
    fn single_class_auc_is_null() {
        let m = compute_metrics(&[0, 0], &[0, 0], &[0.1, 0.9]).unwrap();
        assert_eq!(m.auc, None);
    }

    #[test]
    fn rank_auc_matches_pairwise_oracle() {
        let mut rng = voxreg_core::Rng::new(12);
        for trial in 0..20 {
            let n = 5 + (trial % 7) * 13; // up to ~96 samples
            let labels: Vec<usize> = (0..n).map(|_| (rng.uniform() < 0.4) as usize).collect();
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    // quantized scores force plenty of ties
                    (rng.uniform() * 8.0).round() / 8.0
                })
                .collect();
            assert_eq!(auc_rank(&labels, &scores), auc_pairwise(&labels, &scores));
        }
    }
}
