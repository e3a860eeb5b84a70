//! Confusion-matrix metrics. Rows are true classes, columns predictions.

use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    /// Mean F1 over classes with non-zero support, in `[0, 1]`.
    pub macro_f1: f64,
    /// Mean recall over classes with non-zero support, in `[0, 1]`.
    pub balanced_accuracy: f64,
    pub accuracy: f64,
    /// Classes left out of the means because they have no test samples.
    pub excluded: Vec<usize>,
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        m[t][p] += 1;
    }
    m
}

pub fn metrics(confusion: &[Vec<u64>]) -> Result<Metrics, EvalError> {
    let k = confusion.len();
    if confusion.iter().any(|r| r.len() != k) {
        return Err(EvalError::Input("confusion matrix must be square".into()));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(EvalError::Input("confusion matrix is all zero".into()));
    }
    let predicted: Vec<u64> = (0..k).map(|c| confusion.iter().map(|r| r[c]).sum()).collect();
    let mut per_class = Vec::with_capacity(k);
    let mut excluded = Vec::new();
    let (mut f1_sum, mut recall_sum, mut counted) = (0.0, 0.0, 0usize);
    for (c, row) in confusion.iter().enumerate() {
        let tp = row[c] as f64;
        let support: u64 = row.iter().sum();
        let precision = if predicted[c] > 0 { tp / predicted[c] as f64 } else { 0.0 };
        let recall = if support > 0 { tp / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        if support == 0 {
            excluded.push(c);
        } else {
            f1_sum += f1;
            recall_sum += recall;
            counted += 1;
        }
        per_class.push(ClassMetrics { precision, recall, f1, support });
    }
    if !excluded.is_empty() {
        log::warn!("classes {excluded:?} have no test samples; excluded from macro averages");
    }
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
    Ok(Metrics {
        per_class,
        macro_f1: f1_sum / counted as f64,
        balanced_accuracy: recall_sum / counted as f64,
        accuracy: correct as f64 / total as f64,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_two_class_example() {
        let m = metrics(&[vec![8, 2], vec![4, 6]]).unwrap();
        assert!((m.balanced_accuracy - 0.70).abs() < 1e-15);
        // F1 = {16/22, 2/3}
        let expected = (16.0 / 22.0 + 2.0 / 3.0) / 2.0;
        assert!((m.macro_f1 - expected).abs() < 1e-15);
        assert_eq!(format!("{:.2}", 100.0 * m.macro_f1), "69.70");
    }

    #[test]
    fn diagonal_is_perfect() {
        let m = metrics(&[vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 9]]).unwrap();
        assert_eq!((m.macro_f1, m.balanced_accuracy, m.accuracy), (1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_prediction_on_balanced_set() {
        let m = metrics(&[vec![4, 0, 0, 0], vec![4, 0, 0, 0], vec![4, 0, 0, 0], vec![4, 0, 0, 0]]).unwrap();
        assert!((m.balanced_accuracy - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_support_class_is_excluded() {
        let m = metrics(&[vec![3, 1, 0], vec![0, 0, 0], vec![0, 1, 4]]).unwrap();
        assert_eq!(m.excluded, vec![1]);
        assert!((m.balanced_accuracy - (0.75 + 0.8) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_empty_and_ragged() {
        assert!(metrics(&[vec![0, 0], vec![0, 0]]).is_err());
        assert!(metrics(&[vec![1, 0], vec![0]]).is_err());
    }
}
