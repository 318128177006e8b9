//! Classification metrics: confusion matrix, accuracy, and one-vs-rest
//! precision/recall/F1 with macro averaging.

use crate::error::{Error, Result};

/// One-vs-rest scores for a single class. `degenerate` marks classes
/// where a zero denominator forced a score to 0 (never predicted, never
/// present, or both).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Row = true class, column = predicted class.
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub samples: u64,
}

/// Builds the report from (true, predicted) pairs.
pub fn metrics_from_pairs(pairs: &[(usize, usize)], classes: usize) -> Result<MetricsReport> {
    if classes == 0 {
        return Err(Error::contract("metrics", "need at least one class"));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for &(truth, pred) in pairs {
        if truth >= classes || pred >= classes {
            return Err(Error::contract(
                "metrics",
                format!("pair ({truth}, {pred}) out of range for {classes} classes"),
            ));
        }
        confusion[truth][pred] += 1;
    }
    metrics_from_confusion(confusion)
}

pub fn metrics_from_confusion(confusion: Vec<Vec<u64>>) -> Result<MetricsReport> {
    let classes = confusion.len();
    if classes == 0 || confusion.iter().any(|row| row.len() != classes) {
        return Err(Error::contract("metrics", "confusion matrix must be square and non-empty"));
    }
    let samples: u64 = confusion.iter().flatten().sum();
    if samples == 0 {
        return Err(Error::contract("metrics", "no samples"));
    }
    let correct: u64 = (0..classes).map(|k| confusion[k][k]).sum();
    let accuracy = correct as f64 / samples as f64;

    let mut per_class = Vec::with_capacity(classes);
    for k in 0..classes {
        let tp = confusion[k][k];
        let fp: u64 = (0..classes).filter(|&i| i != k).map(|i| confusion[i][k]).sum();
        let fn_: u64 = (0..classes).filter(|&j| j != k).map(|j| confusion[k][j]).sum();
        let mut degenerate = false;
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            degenerate = true;
            0.0
        };
        let recall = if tp + fn_ > 0 {
            tp as f64 / (tp + fn_) as f64
        } else {
            degenerate = true;
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            degenerate = true;
            0.0
        };
        per_class.push(ClassMetrics { precision, recall, f1, degenerate });
    }
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / classes as f64;
    Ok(MetricsReport { confusion, accuracy, macro_f1, per_class, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binary_fixture_accuracy_and_f1() {
        // Positive class: TP=3, TN=5, FP=1, FN=1.
        let confusion = vec![vec![5, 1], vec![1, 3]];
        let r = metrics_from_confusion(confusion).unwrap();
        assert!((r.accuracy - 0.8).abs() < 1e-15);
        assert!((r.per_class[1].precision - 0.75).abs() < 1e-15);
        assert!((r.per_class[1].recall - 0.75).abs() < 1e-15);
        assert!((r.per_class[1].f1 - 0.75).abs() < 1e-15);
        assert!(!r.per_class[1].degenerate);
        assert_eq!(r.samples, 10);
    }

    #[test]
    fn pairs_and_confusion_routes_agree() {
        let pairs = [(0, 0), (0, 0), (1, 0), (1, 1), (2, 1), (2, 2), (2, 2)];
        let by_pairs = metrics_from_pairs(&pairs, 3).unwrap();
        let confusion = vec![vec![2, 0, 0], vec![1, 1, 0], vec![0, 1, 2]];
        let by_matrix = metrics_from_confusion(confusion.clone()).unwrap();
        assert_eq!(by_pairs.confusion, confusion);
        assert_eq!(by_pairs, by_matrix);
    }

    #[test]
    fn perfect_predictions() {
        let pairs: Vec<(usize, usize)> = (0..4).flat_map(|k| std::iter::repeat_n((k, k), 3)).collect();
        let r = metrics_from_pairs(&pairs, 4).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        assert!(r.per_class.iter().all(|c| c.f1 == 1.0 && !c.degenerate));
    }

    #[test]
    fn absent_class_is_degenerate_with_zero_scores() {
        // Class 2 never appears and is never predicted.
        let r = metrics_from_pairs(&[(0, 0), (1, 1), (1, 0)], 3).unwrap();
        assert!(r.per_class[2].degenerate);
        assert_eq!(r.per_class[2].precision, 0.0);
        assert_eq!(r.per_class[2].recall, 0.0);
        assert_eq!(r.per_class[2].f1, 0.0);
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(metrics_from_pairs(&[], 2).is_err());
        assert!(metrics_from_confusion(vec![vec![0, 0], vec![0, 0]]).is_err());
        assert!(metrics_from_confusion(vec![]).is_err());
        assert!(metrics_from_confusion(vec![vec![1, 0]]).is_err());
        assert!(metrics_from_pairs(&[(0, 5)], 2).is_err());
    }

    #[test]
    fn internal_consistency_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        for _ in 0..20 {
            let classes = rng.gen_range(2..6);
            let confusion: Vec<Vec<u64>> =
                (0..classes).map(|_| (0..classes).map(|_| rng.gen_range(0..9)).collect()).collect();
            let total: u64 = confusion.iter().flatten().sum();
            if total == 0 {
                continue;
            }
            let r = metrics_from_confusion(confusion.clone()).unwrap();
            assert_eq!(r.samples, total);
            // Accuracy is the trace over the total.
            let trace: u64 = (0..classes).map(|k| confusion[k][k]).sum();
            assert!((r.accuracy - trace as f64 / total as f64).abs() < 1e-12);
            // Macro F1 is the unweighted mean.
            let mean = r.per_class.iter().map(|c| c.f1).sum::<f64>() / classes as f64;
            assert!((r.macro_f1 - mean).abs() < 1e-12);
            // F1 is the harmonic mean wherever both parts are positive.
            for c in &r.per_class {
                if c.precision > 0.0 && c.recall > 0.0 {
                    let harmonic = 2.0 / (1.0 / c.precision + 1.0 / c.recall);
                    assert!((c.f1 - harmonic).abs() < 1e-12);
                }
            }
            // Micro precision equals accuracy: false positives are
            // exactly the off-diagonal mass.
            let fp: u64 = (0..classes)
                .map(|k| (0..classes).filter(|&i| i != k).map(|i| confusion[i][k]).sum::<u64>())
                .sum();
            assert!((trace as f64 / (trace + fp) as f64 - r.accuracy).abs() < 1e-12);
        }
    }
}
