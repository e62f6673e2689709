//! Accuracy and macro-averaged F1.

use super::DownstreamError;

/// Accuracy and macro-F1. Per-class F1 is `2TP / (2TP + FP + FN)`; classes
/// with an empty denominator (no true or predicted positives) contribute
/// F1 = 0 to the unweighted mean.
pub fn metrics(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<(f64, f64), DownstreamError> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(DownstreamError::EmptyInput);
    }
    for &l in labels.iter().chain(predictions) {
        if l >= num_classes {
            return Err(DownstreamError::LabelOutOfRange {
                label: l,
                num_classes,
            });
        }
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    let mut correct = 0usize;
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            correct += 1;
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let accuracy = correct as f64 / labels.len() as f64;
    let mut f1_sum = 0f64;
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom > 0 {
            f1_sum += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok((accuracy, f1_sum / num_classes as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_predictor_on_balanced_binary() {
        // all predictions class 0: accuracy 0.5, macro-F1 = (2/3 + 0)/2
        let labels = [0, 1, 0, 1, 0, 1, 0, 1];
        let preds = [0; 8];
        let (acc, f1) = metrics(&preds, &labels, 2).unwrap();
        assert_eq!(acc, 0.5);
        assert!((f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 2, 1, 0];
        let (acc, f1) = metrics(&labels, &labels, 3).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn matches_confusion_matrix_oracle_on_random_three_class() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let n = 500;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let (acc, f1) = metrics(&preds, &labels, 3).unwrap();

        // oracle: build the full confusion matrix, derive both metrics
        let mut cm = [[0usize; 3]; 3];
        for (&p, &y) in preds.iter().zip(&labels) {
            cm[y][p] += 1;
        }
        let correct: usize = (0..3).map(|c| cm[c][c]).sum();
        let want_acc = correct as f64 / n as f64;
        let mut want_f1 = 0f64;
        for c in 0..3 {
            let tp = cm[c][c];
            let fp: usize = (0..3).filter(|&y| y != c).map(|y| cm[y][c]).sum();
            let fn_: usize = (0..3).filter(|&p| p != c).map(|p| cm[c][p]).sum();
            let denom = 2 * tp + fp + fn_;
            if denom > 0 {
                want_f1 += 2.0 * tp as f64 / denom as f64;
            }
        }
        want_f1 /= 3.0;
        assert_eq!(acc, want_acc);
        assert!((f1 - want_f1).abs() < 1e-15);
    }

    #[test]
    fn absent_class_contributes_zero_f1() {
        // class 2 never appears in labels or predictions
        let labels = [0, 1, 0, 1];
        let preds = [0, 1, 1, 1];
        let (_, f1) = metrics(&preds, &labels, 3).unwrap();
        let f1_0 = 2.0 * 1.0 / (2.0 + 0.0 + 1.0);
        let f1_1 = 2.0 * 2.0 / (4.0 + 1.0 + 0.0);
        assert!((f1 - (f1_0 + f1_1) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(metrics(&[], &[], 2).is_err());
        assert!(metrics(&[0], &[0, 1], 2).is_err());
    }
}
