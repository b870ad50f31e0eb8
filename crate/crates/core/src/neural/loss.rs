use super::tensor::{Real, Tensor};
use super::NnError;

/// Probabilities are clamped to `[BCE_EPS, 1 − BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy over all elements, and its gradient with
/// respect to `pred`.
pub fn bce_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>), NnError> {
    if pred.shape() != target.shape() {
        return Err(NnError::LossShape {
            pred: pred.shape().to_vec(),
            target: target.shape().to_vec(),
        });
    }
    let n = pred.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.data().iter().zip(target.data()) {
        let p = p.f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
        let t = t.f64();
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        grad.push(T::of((p - t) / (p * (1.0 - p)) / n));
    }
    Ok((total / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let (l, _) = bce_loss(&t(&[1.0, 0.0, 1.0]), &t(&[1.0, 0.0, 1.0])).unwrap();
        assert!(l <= 1e-6, "{l}");
    }

    #[test]
    fn half_everywhere_is_ln2() {
        let (l, _) = bce_loss(&t(&[0.5; 5]), &t(&[1.0, 0.0, 1.0, 0.0, 0.3])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = [0.2, 0.7, 0.45, 0.9];
        let tg = t(&[0.0, 1.0, 0.3, 1.0]);
        let (_, g) = bce_loss(&t(&p), &tg).unwrap();
        let eps = 1e-6;
        for i in 0..p.len() {
            let mut hi = p;
            let mut lo = p;
            hi[i] += eps;
            lo[i] -= eps;
            let num = (bce_loss(&t(&hi), &tg).unwrap().0 - bce_loss(&t(&lo), &tg).unwrap().0) / (2.0 * eps);
            let rel = (num - g.data()[i]).abs() / num.abs().max(g.data()[i].abs());
            assert!(rel < 1e-6, "bin {i}: {rel}");
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(matches!(
            bce_loss(&t(&[0.5, 0.5]), &t(&[1.0])),
            Err(NnError::LossShape { .. })
        ));
    }
}
