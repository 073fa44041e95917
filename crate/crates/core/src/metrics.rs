//! Confusion-matrix metrics and rank-based AUROC.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("AUROC needs at least one positive and one negative label")]
    SingleClass,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Counts with the rule `score >= threshold` means positive.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> ConfusionCounts {
    assert_eq!(scores.len(), labels.len());
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        log::debug!("0/0 metric, reporting 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, precision, recall, F1 and specificity; a zero denominator
/// yields 0.
pub fn point_metrics(c: &ConfusionCounts) -> PointMetrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    PointMetrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f1,
        specificity: ratio(c.tn, c.tn + c.fp),
    }
}

/// Area under the ROC curve via the Mann-Whitney statistic with midranks, so
/// tied positive/negative pairs count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // sum of (1-based) midranks of positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum += midrank * pos_in_group as f64;
        i = j;
    }
    let n_pos_f = n_pos as f64;
    let u = rank_sum - n_pos_f * (n_pos_f + 1.0) / 2.0;
    Ok(u / (n_pos_f * n_neg as f64))
}

/// The six reported metrics for one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub auroc: f64,
}

impl MetricsReport {
    /// Display names in table order.
    pub const NAMES: [&'static str; 6] = ["Accuracy", "Precision", "Recall", "F1-score", "Specificity", "AUROC"];

    pub fn evaluate(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Self, MetricsError> {
        let pm = point_metrics(&confusion(scores, labels, threshold));
        Ok(MetricsReport {
            accuracy: pm.accuracy,
            precision: pm.precision,
            recall: pm.recall,
            f1: pm.f1,
            specificity: pm.specificity,
            auroc: auroc(scores, labels)?,
        })
    }

    pub fn values(&self) -> [f64; 6] {
        [
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.specificity,
            self.auroc,
        ]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        MetricsReport {
            accuracy: v[0],
            precision: v[1],
            recall: v[2],
            f1: v[3],
            specificity: v[4],
            auroc: v[5],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confusion_examples() {
        let c = confusion(&[0.9, 0.1], &[true, false], 0.5);
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 0, tn: 1, fn_: 0 });
        let c = confusion(&[0.9, 0.1, 0.0], &[true, false, false], 0.0);
        assert_eq!(c.fp, 2);
        assert_eq!(c.tn, 0);
    }

    #[test]
    fn point_metric_examples() {
        let m = point_metrics(&ConfusionCounts { tp: 1, fp: 0, tn: 1, fn_: 0 });
        assert_eq!([m.accuracy, m.precision, m.recall, m.f1, m.specificity], [1.0; 5]);

        let m = point_metrics(&ConfusionCounts { tp: 0, fp: 0, tn: 3, fn_: 2 });
        assert_eq!((m.precision, m.f1), (0.0, 0.0));

        let m = point_metrics(&ConfusionCounts { tp: 8, fp: 2, tn: 8, fn_: 2 });
        for v in [m.accuracy, m.precision, m.recall, m.f1, m.specificity] {
            assert!((v - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.2], &[true, true]), Err(MetricsError::SingleClass));
    }

    proptest! {
        #[test]
        fn auroc_monotone_invariance_and_label_flip(
            data in prop::collection::vec((0u8..15, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&y| y) && labels.iter().any(|&y| !y));
            let a = auroc(&scores, &labels).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp()).collect();
            prop_assert!((auroc(&mapped, &labels).unwrap() - a).abs() < 1e-12);
            let flipped: Vec<bool> = labels.iter().map(|y| !y).collect();
            prop_assert!((auroc(&scores, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
        }

        #[test]
        fn point_metrics_bounded_and_consistent(tp in 0usize..50, fp in 0usize..50, tn in 0usize..50, fn_ in 0usize..50) {
            let c = ConfusionCounts { tp, fp, tn, fn_ };
            prop_assume!(c.total() > 0);
            let m = point_metrics(&c);
            for v in [m.accuracy, m.precision, m.recall, m.f1, m.specificity] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let p = (tp + fn_) as f64;
            let n = (tn + fp) as f64;
            prop_assert!((m.accuracy - (m.recall * p + m.specificity * n) / (p + n)).abs() < 1e-12);
            if tp + fp > 0 && tp + fn_ > 0 && m.precision + m.recall > 0.0 {
                let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                prop_assert!((m.f1 - h).abs() < 1e-15);
            }
        }

        #[test]
        fn confusion_monotone_in_threshold(
            scores in prop::collection::vec(0.0f64..1.0, 1..40),
            t1 in 0.0f64..1.0, t2 in 0.0f64..1.0,
        ) {
            let labels: Vec<bool> = (0..scores.len()).map(|i| i % 3 == 0).collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = confusion(&scores, &labels, lo);
            let b = confusion(&scores, &labels, hi);
            prop_assert!(b.tp <= a.tp && b.fp <= a.fp);
            prop_assert_eq!(a.total(), scores.len());
        }
    }
}
