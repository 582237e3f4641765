//! Confusion matrix and the derived accuracy / precision / recall / F1
//! scores, overall and per class.

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// K×K counts; rows are the true class, columns the prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn record(&mut self, true_label: usize, predicted: usize) {
        self.counts[true_label * self.k + predicted] += 1;
    }

    pub fn count(&self, true_label: usize, predicted: usize) -> u64 {
        self.counts[true_label * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.count(i, i)).sum()
    }

    pub fn row_sum(&self, true_label: usize) -> u64 {
        (0..self.k).map(|p| self.count(true_label, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.k).map(|t| self.count(t, predicted)).sum()
    }

    /// Elementwise addition; merging shard results is order-independent.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k, "confusion matrices over different class counts");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub examples: u64,
    pub per_class: Vec<ClassMetrics>,
}

/// One-vs-rest per class: TP = cm[k][k], FP = column − TP, FN = row − TP;
/// precision = TP/(TP+FP), recall = TP/(TP+FN), F1 = 2PR/(P+R), with 0/0
/// defined as 0. Accuracy is trace/total; macro scores are unweighted class
/// means (degenerate classes still count).
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(CoreError::contract("compute_metrics: empty confusion matrix".to_string()));
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut per_class = Vec::with_capacity(cm.classes());
    for class in 0..cm.classes() {
        let tp = cm.count(class, class);
        let fp = cm.col_sum(class) - tp;
        let fn_ = cm.row_sum(class) - tp;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics { precision, recall, f1, support: cm.row_sum(class) });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| {
        per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
    };
    Ok(MetricsReport {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        examples: total,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn from_pairs(k: usize, pairs: &[(usize, usize)]) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(k);
        for &(t, p) in pairs {
            cm.record(t, p);
        }
        cm
    }

    #[test]
    fn perfect_diagonal_scores_one_everywhere() {
        let mut cm = ConfusionMatrix::new(3);
        for class in 0..3 {
            for _ in 0..5 {
                cm.record(class, class);
            }
        }
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        assert!(m.per_class.iter().all(|c| c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0));
    }

    #[test]
    fn binary_case_matches_hand_arithmetic() {
        // class 0: TP=1, FP=1, FN=0 → P=0.5, R=1, F1=2/3
        let cm = from_pairs(2, &[(0, 0), (1, 0)]);
        let m = compute_metrics(&cm).unwrap();
        let c0 = &m.per_class[0];
        assert_eq!(c0.precision, 0.5);
        assert_eq!(c0.recall, 1.0);
        assert!((c0.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn degenerate_class_scores_zero_but_still_averages() {
        // class 2 never appears as truth or prediction
        let cm = from_pairs(3, &[(0, 0), (1, 1)]);
        let m = compute_metrics(&cm).unwrap();
        let c2 = &m.per_class[2];
        assert_eq!((c2.precision, c2.recall, c2.f1), (0.0, 0.0, 0.0));
        assert_eq!(c2.support, 0);
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(compute_metrics(&ConfusionMatrix::new(4)).is_err());
    }

    #[test]
    fn matches_brute_force_recount_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let k = rng.gen_range(2..=8);
            let n = rng.gen_range(1..=60);
            let pairs: Vec<(usize, usize)> =
                (0..n).map(|_| (rng.gen_range(0..k), rng.gen_range(0..k))).collect();
            let cm = from_pairs(k, &pairs);
            let m = compute_metrics(&cm).unwrap();

            // oracle: recount TP/FP/FN straight from the raw pairs
            let correct = pairs.iter().filter(|(t, p)| t == p).count();
            assert_eq!(m.accuracy, correct as f64 / n as f64);
            for class in 0..k {
                let tp = pairs.iter().filter(|&&(t, p)| t == class && p == class).count() as f64;
                let fp = pairs.iter().filter(|&&(t, p)| t != class && p == class).count() as f64;
                let fn_ = pairs.iter().filter(|&&(t, p)| t == class && p != class).count() as f64;
                let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
                let recall = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                let got = &m.per_class[class];
                assert_eq!(got.precision, precision);
                assert_eq!(got.recall, recall);
                assert_eq!(got.f1, f1);
            }
        }
    }

    #[test]
    fn micro_scores_collapse_to_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let k = rng.gen_range(2..=6);
            let n = rng.gen_range(1..=40);
            let mut cm = ConfusionMatrix::new(k);
            for _ in 0..n {
                cm.record(rng.gen_range(0..k), rng.gen_range(0..k));
            }
            let tp_sum: u64 = (0..k).map(|c| cm.count(c, c)).sum();
            let fp_sum: u64 = (0..k).map(|c| cm.col_sum(c) - cm.count(c, c)).sum();
            let fn_sum: u64 = (0..k).map(|c| cm.row_sum(c) - cm.count(c, c)).sum();
            let micro_p = tp_sum as f64 / (tp_sum + fp_sum) as f64;
            let micro_r = tp_sum as f64 / (tp_sum + fn_sum) as f64;
            let accuracy = compute_metrics(&cm).unwrap().accuracy;
            assert_eq!(micro_p, accuracy);
            assert_eq!(micro_r, accuracy);
        }
    }

    #[test]
    fn f1_equals_harmonic_mean_when_defined() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let k = rng.gen_range(2..=5);
            let mut cm = ConfusionMatrix::new(k);
            for _ in 0..rng.gen_range(5..=50) {
                cm.record(rng.gen_range(0..k), rng.gen_range(0..k));
            }
            for c in compute_metrics(&cm).unwrap().per_class {
                if c.precision > 0.0 && c.recall > 0.0 {
                    let harmonic = 2.0 / (1.0 / c.precision + 1.0 / c.recall);
                    assert!((c.f1 - harmonic).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn merge_adds_elementwise() {
        let a = from_pairs(2, &[(0, 0), (1, 0)]);
        let b = from_pairs(2, &[(1, 1), (1, 0)]);
        let mut merged = a.clone();
        merged.merge(&b);
        assert_eq!(merged.total(), 4);
        assert_eq!(merged.count(1, 0), 2);
    }
}
