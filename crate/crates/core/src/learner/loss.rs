//! Symmetric negative-cosine loss with stop-gradient targets.
//!
//! `L = -cos(sg(z1), g(z2)) - cos(sg(z2), g(z1))`, so `L ∈ [-2, 2]`.

use super::nn::{axpy, dot, Dense};
use crate::error::{Error, Result};

/// Gradients of the loss. `d_z1` and `d_z2` flow only through the
/// predictor branches; the stop-gradient targets receive nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrads {
    pub d_z1: Vec<f64>,
    pub d_z2: Vec<f64>,
    pub predictor: Dense,
}

/// `-cos(target, prediction)` and its gradient with respect to `prediction`.
/// The target is a constant.
pub fn negative_cosine(target: &[f64], prediction: &[f64]) -> Result<(f64, Vec<f64>)> {
    let nt = dot(target, target).sqrt();
    let np = dot(prediction, prediction).sqrt();
    if !(nt > 0.0) || !(np > 0.0) {
        return Err(Error::Degenerate("zero-norm vector in cosine loss".into()));
    }
    let cos = dot(target, prediction) / (nt * np);
    // d(-cos)/dp = -(t/|t| - cos * p/|p|) / |p|
    let grad = target
        .iter()
        .zip(prediction)
        .map(|(t, p)| -(t / nt - cos * p / np) / np)
        .collect();
    Ok((-cos, grad))
}

/// One stop-gradient branch: `-cos(sg(target), g(online))`. Accumulates the
/// predictor gradient into `pred_grad` and returns the loss together with
/// the gradient for `online`.
pub fn branch_loss(
    target: &[f64],
    online: &[f64],
    predictor: &Dense,
    pred_grad: &mut Dense,
) -> Result<(f64, Vec<f64>)> {
    let mut p = vec![0.0; predictor.out_dim];
    predictor.forward(online, &mut p);
    let (loss, d_p) = negative_cosine(target, &p)?;
    let mut d_online = vec![0.0; predictor.in_dim];
    predictor.backward(online, &d_p, pred_grad, Some(&mut d_online));
    Ok((loss, d_online))
}

/// Full symmetric loss for one pair of embeddings.
pub fn simsiam_loss(z1: &[f64], z2: &[f64], predictor: &Dense) -> Result<(f64, LossGrads)> {
    if dot(z1, z1) == 0.0 || dot(z2, z2) == 0.0 {
        return Err(Error::Degenerate("zero-norm embedding".into()));
    }
    let mut pred_grad = predictor.zeros_like();
    let (l12, d_z2) = branch_loss(z1, z2, predictor, &mut pred_grad)?;
    let (l21, d_z1) = branch_loss(z2, z1, predictor, &mut pred_grad)?;
    Ok((
        l12 + l21,
        LossGrads {
            d_z1,
            d_z2,
            predictor: pred_grad,
        },
    ))
}

/// Adds `scale * src` into `dst` parameter-wise.
pub(crate) fn accumulate(dst: &mut Dense, src: &Dense, scale: f64) {
    axpy(scale, &src.weight, &mut dst.weight);
    axpy(scale, &src.bias, &mut dst.bias);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_embeddings_give_minus_two() {
        let z = [0.6, 0.8];
        let (l, _) = simsiam_loss(&z, &z, &Dense::identity(2)).unwrap();
        assert!((l + 2.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_embeddings_give_zero() {
        let (l, _) = simsiam_loss(&[1.0, 0.0], &[0.0, 3.0], &Dense::identity(2)).unwrap();
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn opposite_embeddings_give_plus_two() {
        let (l, _) = simsiam_loss(&[1.0, -2.0], &[-1.0, 2.0], &Dense::identity(2)).unwrap();
        assert!((l - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_embedding_is_degenerate() {
        assert!(matches!(
            simsiam_loss(&[0.0, 0.0], &[1.0, 0.0], &Dense::identity(2)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn negative_cosine_gradient_is_orthogonal_to_prediction() {
        let (_, g) = negative_cosine(&[1.0, 2.0, -1.0], &[0.5, -0.3, 2.0]).unwrap();
        assert!(dot(&g, &[0.5, -0.3, 2.0]).abs() < 1e-14);
    }
}
