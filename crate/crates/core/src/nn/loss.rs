use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Scores are clamped into `[SCORE_CLAMP, 1 - SCORE_CLAMP]` before taking logs.
pub const SCORE_CLAMP: f64 = 1e-7;

/// `(1/K) Σ ‖pred_i − target_i‖²` over the K rows, with its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let k = pred.rows() as f64;
    let mut loss = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / k
        })
        .collect();
    Ok((loss / k, Tensor::from_raw(pred.shape().to_vec(), grad)))
}

/// Binary cross-entropy of one discriminator score; `real` selects label 1.
/// Returns the loss and dLoss/dScore (zero when the clamp is active).
pub fn bce_loss(score: f64, real: bool) -> (f64, f64) {
    let s = score.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    let clamped = s != score;
    if real {
        (-s.ln(), if clamped { 0.0 } else { -1.0 / s })
    } else {
        (-(1.0 - s).ln(), if clamped { 0.0 } else { 1.0 / (1.0 - s) })
    }
}

/// Mean BCE over a column of scores, all sharing one label.
pub fn bce_batch(scores: &Tensor, real: bool) -> (f64, Tensor) {
    let n = scores.len() as f64;
    let mut total = 0.0;
    let grad = scores
        .data()
        .iter()
        .map(|&s| {
            let (l, g) = bce_loss(s, real);
            total += l;
            g / n
        })
        .collect();
    (total / n, Tensor::from_raw(scores.shape().to_vec(), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mse_zero_when_equal() {
        let a = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let (l, g) = mse_loss(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mse_hand_value() {
        let p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let (l, g) = mse_loss(&p, &t).unwrap();
        assert_abs_diff_eq!(l, 2.5, epsilon = 1e-15);
        assert_eq!(g.data(), &[1.0, 2.0]);
    }

    #[test]
    fn mse_gradient_matches_central_differences() {
        let p = Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.4]).unwrap();
        let t = Tensor::matrix(2, 3, vec![1.0, 0.5, -0.5, 0.0, 0.2, 0.9]).unwrap();
        let (_, g) = mse_loss(&p, &t).unwrap();
        let eps = 1e-6;
        for i in 0..p.len() {
            let mut hi = p.clone();
            hi.data_mut()[i] += eps;
            let mut lo = p.clone();
            lo.data_mut()[i] -= eps;
            let fd = (mse_loss(&hi, &t).unwrap().0 - mse_loss(&lo, &t).unwrap().0) / (2.0 * eps);
            assert_abs_diff_eq!(fd, g.data()[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn mse_shape_mismatch() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(mse_loss(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn bce_half_is_ln2() {
        assert_abs_diff_eq!(bce_loss(0.5, true).0, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(bce_loss(0.5, false).0, std::f64::consts::LN_2, epsilon = 1e-12);
        let pair = bce_loss(0.5, true).0 + bce_loss(0.5, false).0;
        assert_abs_diff_eq!(pair, 1.386294, epsilon = 1e-6);
    }

    #[test]
    fn bce_near_perfect_real() {
        let (l, _) = bce_loss(1.0 - 1e-7, true);
        assert_abs_diff_eq!(l, 1e-7, epsilon = 1e-12);
        // clamping keeps exact 0 and 1 finite
        assert!(bce_loss(0.0, true).0.is_finite());
        assert!(bce_loss(1.0, false).0.is_finite());
    }

    #[test]
    fn bce_gradient_matches_central_differences() {
        for &s in &[0.1, 0.4, 0.83] {
            for &real in &[true, false] {
                let eps = 1e-7;
                let fd = (bce_loss(s + eps, real).0 - bce_loss(s - eps, real).0) / (2.0 * eps);
                assert_abs_diff_eq!(fd, bce_loss(s, real).1, epsilon = 1e-6);
            }
        }
    }
}
