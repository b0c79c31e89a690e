use crate::tensor::DenseMatrix;
use crate::{Error, Result};

/// Row-wise argmax, lowest class on ties.
pub fn predict_classes(probs: &DenseMatrix) -> Vec<usize> {
    (0..probs.rows()).map(|i| probs.argmax_row(i)).collect()
}

/// Unweighted mean of per-class F1 over `eval_set`. Every class counts in
/// the denominator, including classes that are neither predicted nor
/// present (they contribute 0).
pub fn macro_f1(predictions: &[usize], truth: &[usize], eval_set: &[usize], num_classes: usize) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::Empty("macro_f1"));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for &i in eval_set {
        let (p, t) = (predictions[i], truth[i]);
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let total: f64 = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / num_classes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let truth = [0, 1, 2, 1];
        assert_eq!(macro_f1(&truth, &truth, &[0, 1, 2, 3], 3).unwrap(), 1.0);
    }

    #[test]
    fn binary_hand_computation() {
        // Class 1: TP 1, FP 1, FN 0. Class 0: TP 1, FP 0, FN 1.
        let truth = [0, 1, 0];
        let pred = [0, 1, 1];
        let f1 = macro_f1(&pred, &truth, &[0, 1, 2], 2).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_predicted_class() {
        let truth = [0, 1, 2, 0, 1, 2];
        let pred = [0; 6];
        let f1 = macro_f1(&pred, &truth, &[0, 1, 2, 3, 4, 5], 3).unwrap();
        let class0 = 2.0 * (1.0 / 3.0) / (1.0 + 1.0 / 3.0);
        assert!((f1 - class0 / 3.0).abs() < 1e-12);
        assert!((f1 - 0.1667).abs() < 1e-3);
    }

    #[test]
    fn only_eval_rows_count_and_empty_is_error() {
        let truth = [0, 1, 1];
        let pred = [1, 1, 1];
        assert_eq!(macro_f1(&pred, &truth, &[1, 2], 2).unwrap(), 0.5);
        assert!(macro_f1(&pred, &truth, &[], 2).is_err());
    }

    #[test]
    fn argmax_ties_take_lowest_class() {
        let p = DenseMatrix::from_rows(&[[0.5, 0.5], [0.2, 0.8]]);
        assert_eq!(predict_classes(&p), vec![0, 1]);
    }
}
