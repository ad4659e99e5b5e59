//! Detection metrics: precision/recall, F-scores, rank-based AUROC.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Recall-weighted F-measure `5PR / (4P + R)`.
    pub f2: f64,
    /// Absent (not 0.5) when the labels are single-class.
    pub auroc: Option<f64>,
    pub support_positive: usize,
    pub support_negative: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
}

/// Threshold scores and compute the report.
pub fn compute_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            what: "metrics inputs".into(),
            expected: format!("{} labels", scores.len()),
            actual: format!("{}", labels.len()),
        });
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        let predicted = s >= threshold;
        match (predicted, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let f2 = if precision + recall == 0.0 {
        0.0
    } else {
        5.0 * precision * recall / (4.0 * precision + recall)
    };
    Ok(MetricsReport {
        precision,
        recall,
        f1,
        f2,
        auroc: auroc(scores, labels),
        support_positive: tp + fn_,
        support_negative: fp + tn,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        true_negatives: tn,
    })
}

/// Rank-statistic AUROC with midrank tie handling. `None` when only one
/// class is present.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Midrank for the tie group [i, j] (1-based ranks).
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn perfect_predictions_score_one() {
        let scores = vec![0.9, 0.8, 0.1, 0.2];
        let labels = vec![1, 1, 0, 0];
        let m = compute_metrics(&scores, &labels, 0.5).unwrap();
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.f2, 1.0);
        assert_eq!(m.auroc, Some(1.0));
    }

    #[test]
    fn equal_precision_recall_collapses_f_scores() {
        // tp = 1, fp = 1, fn = 1 -> P = R = 0.5.
        let scores = vec![0.9, 0.9, 0.1, 0.1];
        let labels = vec![1, 0, 1, 0];
        let m = compute_metrics(&scores, &labels, 0.5).unwrap();
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 0.5);
        assert!((m.f1 - 0.5).abs() < 1e-12);
        assert!((m.f2 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn f_score_formulas() {
        // P = 0.25, R = 1.0 -> F1 = 0.4, F2 = 0.625.
        let scores = vec![0.9, 0.9, 0.9, 0.9];
        let labels = vec![1, 0, 0, 0];
        let m = compute_metrics(&scores, &labels, 0.5).unwrap();
        assert!((m.precision - 0.25).abs() < 1e-12);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 0.4).abs() < 1e-12);
        assert!((m.f2 - 0.625).abs() < 1e-12);
    }

    #[test]
    fn zero_denominators_yield_zero_f_scores() {
        let scores = vec![0.1, 0.1];
        let labels = vec![1, 1];
        let m = compute_metrics(&scores, &labels, 0.5).unwrap();
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.f2, 0.0);
    }

    #[test]
    fn single_class_auroc_is_absent() {
        let m = compute_metrics(&[0.3, 0.7], &[1, 1], 0.5).unwrap();
        assert_eq!(m.auroc, None);
    }

    #[test]
    fn f2_favors_recall() {
        let mut rng = crate::rng::stream(1, "metrics-test", 0);
        for _ in 0..200 {
            let n = 40;
            let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.4)).collect();
            let m = compute_metrics(&scores, &labels, 0.5).unwrap();
            if m.recall > m.precision {
                assert!(m.f2 >= m.f1 - 1e-12);
            }
            if m.recall < m.precision {
                assert!(m.f2 <= m.f1 + 1e-12);
            }
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        let mut rng = crate::rng::stream(2, "metrics-test", 1);
        let scores: Vec<f64> = (0..60).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..60).map(|_| u8::from(rng.random::<f64>() < 0.3)).collect();
        let base = auroc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|&s| (4.0 * s - 1.0).tanh()).collect();
        let transformed = auroc(&squashed, &labels).unwrap();
        assert!((base - transformed).abs() < 1e-12);
    }

    #[test]
    fn auroc_handles_ties_as_half_credit() {
        // All scores equal: AUROC must be exactly 0.5.
        let scores = vec![0.4; 10];
        let labels = vec![1, 0, 1, 0, 1, 0, 0, 0, 1, 0];
        assert_eq!(auroc(&scores, &labels), Some(0.5));
    }
}
