//! Softmax cross-entropy, stabilized by max subtraction.

use super::tensor::{Real, Tensor};
use super::NnError;

/// Probabilities over the last (only) axis of a rank-1 logit vector.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - m).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Loss `-log softmax(logits)[label]` and its gradient
/// `softmax(logits) - onehot(label)`.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    label: usize,
) -> Result<(T, Tensor<T>), NnError> {
    if logits.rank() != 1 || logits.numel() < 2 {
        return Err(NnError::ShapeMismatch(format!(
            "loss wants >= 2 logits in a vector, got {:?}",
            logits.dims()
        )));
    }
    let classes = logits.numel();
    if label >= classes {
        return Err(NnError::LabelOutOfRange { label, classes });
    }
    let x = logits.data();
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = x.iter().map(|&v| (v - m).exp()).sum();
    let loss = sum.ln() - (x[label] - m);

    let mut grad = softmax(x);
    grad[label] -= T::one();
    Ok((loss, Tensor::from_vec(&[classes], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::from_vec(&[4], vec![0.7f64; 4]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, 2).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        assert!((grad.data()[2] - (0.25 - 1.0)).abs() < 1e-12);
        assert!((grad.data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logit_has_negligible_loss() {
        let logits = Tensor::from_vec(&[4], vec![100.0f64, 0.0, 0.0, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, 0).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn softmax_is_a_distribution_even_for_huge_logits() {
        let p = softmax(&[1000.0f64, -1000.0, 999.0, 0.0]);
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let vals = [0.3f64, -1.2, 0.8, 2.1];
        let logits = Tensor::from_vec(&[4], vals.to_vec()).unwrap();
        let (_, grad) = softmax_cross_entropy(&logits, 1).unwrap();
        let eps = 1e-6;
        for i in 0..4 {
            let mut plus = vals;
            plus[i] += eps;
            let mut minus = vals;
            minus[i] -= eps;
            let lp = softmax_cross_entropy(&Tensor::from_vec(&[4], plus.to_vec()).unwrap(), 1)
                .unwrap()
                .0;
            let lm = softmax_cross_entropy(&Tensor::from_vec(&[4], minus.to_vec()).unwrap(), 1)
                .unwrap()
                .0;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - grad.data()[i]).abs() < 1e-6, "component {i}");
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let logits = Tensor::from_vec(&[4], vec![0.0f64; 4]).unwrap();
        assert_eq!(
            softmax_cross_entropy(&logits, 4).unwrap_err(),
            NnError::LabelOutOfRange { label: 4, classes: 4 }
        );
        let single = Tensor::from_vec(&[1], vec![0.0f64]).unwrap();
        assert!(matches!(softmax_cross_entropy(&single, 0), Err(NnError::ShapeMismatch(_))));
    }
}
