//! Scalar loss builders recorded on the autodiff tape.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Mean squared deviation of a probability vector from the one-hot vector for
/// `target_class`. With `negate` the result is multiplied by -1 so that
/// minimization pushes the distribution *away* from the class instead of
/// toward it. Accepts rank-1 `(l)` or single-row rank-2 `(1, l)` input whose
/// entries sum to 1 within 1e-4.
pub fn mse_onehot_loss(probabilities: &Var, target_class: usize, negate: bool) -> Result<Var> {
    let shape = probabilities.shape();
    let l = match shape.as_slice() {
        [l] => *l,
        [1, l] => *l,
        _ => {
            return Err(Error::shape(
                "mse_onehot_loss",
                format!("expected a single probability vector, got shape {shape:?}"),
            ))
        }
    };
    if target_class >= l {
        return Err(Error::param(
            "mse_onehot_loss",
            format!("class {target_class} out of range for {l} classes"),
        ));
    }
    let sum: f64 = probabilities.value().data().iter().map(|&p| p as f64).sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(Error::param(
            "mse_onehot_loss",
            format!("probabilities sum to {sum}, not 1"),
        ));
    }
    let mut onehot = vec![0.0f32; l];
    onehot[target_class] = 1.0;
    let target = probabilities.tape().constant(Tensor::from_vec(shape, onehot)?);
    let diff = probabilities.sub(&target)?;
    let loss = diff.mul(&diff)?.mean();
    Ok(if negate { loss.mul_scalar(-1.0) } else { loss })
}

/// Stabilized softmax cross-entropy of a single logit vector against an
/// integer label: -log softmax(logits)[label].
pub fn softmax_cross_entropy(logits: &Var, label: usize) -> Result<Var> {
    let shape = logits.shape();
    let l = match shape.as_slice() {
        [l] => *l,
        [1, l] => *l,
        _ => {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("expected a single logit vector, got shape {shape:?}"),
            ))
        }
    };
    logits.reshape(vec![1, l])?.softmax_cross_entropy(&[label])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape, Tensor};

    #[test]
    fn uniform_four_class_target_two_gives_hand_value() {
        // (3 * 0.25^2 + 0.75^2) / 4 = 0.1875
        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![4], vec![0.25; 4]).unwrap());
        let loss = mse_onehot_loss(&p, 2, false).unwrap();
        assert!((loss.scalar().unwrap() - 0.1875).abs() < 1e-7);
    }

    #[test]
    fn exact_onehot_is_zero_both_modes() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![4], vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        assert_eq!(mse_onehot_loss(&p, 2, false).unwrap().scalar().unwrap(), 0.0);
        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, 0.0, 0.0]).unwrap());
        assert_eq!(mse_onehot_loss(&p, 0, true).unwrap().scalar().unwrap(), 0.0);
    }

    #[test]
    fn negate_flips_sign() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![4], vec![0.25; 4]).unwrap());
        let loss = mse_onehot_loss(&p, 1, true).unwrap();
        assert!((loss.scalar().unwrap() + 0.1875).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_class_and_non_distribution() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![4], vec![0.25; 4]).unwrap());
        assert!(matches!(mse_onehot_loss(&p, 4, false), Err(Error::Param { .. })));
        let q = tape.leaf(Tensor::from_vec(vec![4], vec![0.5; 4]).unwrap());
        assert!(matches!(mse_onehot_loss(&q, 0, false), Err(Error::Param { .. })));
    }

    #[test]
    fn accepts_single_row_matrix() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![1, 4], vec![0.25; 4]).unwrap());
        let loss = mse_onehot_loss(&p, 2, false).unwrap();
        assert!((loss.scalar().unwrap() - 0.1875).abs() < 1e-7);
    }

    #[test]
    fn mse_gradient_through_softmax_matches_finite_differences() {
        let logits = Tensor::from_vec(vec![5], vec![0.3, -1.2, 0.8, 0.1, -0.5]).unwrap();
        let worst = grad_check(
            |_, x| mse_onehot_loss(&x.softmax()?, 2, false),
            &logits,
            1e-3,
        )
        .unwrap();
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn equal_logits_cost_is_log_class_count() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(vec![10]));
        let loss = softmax_cross_entropy(&z, 3).unwrap();
        assert!((loss.scalar().unwrap() - 10.0f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logits_cost_is_tiny() {
        // -log(e^10 / (e^10 + 1)) = log(1 + e^-10) ~ 4.54e-5
        let tape = Tape::new();
        let z = tape.leaf(Tensor::from_vec(vec![2], vec![10.0, 0.0]).unwrap());
        let loss = softmax_cross_entropy(&z, 0).unwrap();
        let expected = (1.0f64 + (-10.0f64).exp()).ln() as f32;
        assert!((loss.scalar().unwrap() - expected).abs() < 1e-7);
        assert!((loss.scalar().unwrap() - 4.54e-5).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = Tensor::from_vec(vec![6], vec![1.0, -0.4, 0.2, 2.1, -1.3, 0.0]).unwrap();
        let worst = grad_check(|_, x| softmax_cross_entropy(x, 3), &logits, 1e-3).unwrap();
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(vec![4]));
        assert!(matches!(softmax_cross_entropy(&z, 4), Err(Error::Param { .. })));
    }
}
