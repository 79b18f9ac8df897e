use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Predictions are clipped to `[EPS, 1 - EPS]` before taking logarithms.
pub const BCE_EPSILON: f64 = 1e-7;

fn check(pred: &Tensor, target: &Tensor) -> Result<usize> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("binary cross-entropy target", pred.shape(), target.shape()));
    }
    if pred.batch() == 0 {
        return Err(Error::EmptyInput("loss over an empty batch".into()));
    }
    Ok(pred.batch())
}

/// Binary cross-entropy summed over outputs and averaged over frames.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let n = check(pred, target)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / n as f64)
}

/// Derivative of `bce_loss` with respect to the predictions. The clip is
/// treated as the identity in the backward pass so that saturated, wrong
/// outputs still receive a gradient.
pub fn bce_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let n = check(pred, target)? as f64;
    let g = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            (p - t) / (p * (1.0 - p)) / n
        })
        .collect();
    Tensor::from_vec(pred.shape(), g)
}

/// `l1 * sum|w| + l2 * sum w^2` over connection weights only.
pub fn penalty_value(net: &super::Network, penalty: super::Penalty) -> f64 {
    if penalty.l1 == 0.0 && penalty.l2 == 0.0 {
        return 0.0;
    }
    net.params()
        .into_iter()
        .zip(net.weight_mask())
        .filter(|(_, w)| *w)
        .map(|(t, _)| {
            t.data()
                .iter()
                .map(|w| penalty.l1 * w.abs() + penalty.l2 * w * w)
                .sum::<f64>()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn hand_computed_loss() {
        let p = Tensor::from_vec(&[2, 2], vec![0.9, 0.2, 0.5, 0.5]).unwrap();
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let expected = (-(0.9f64.ln()) - 0.8f64.ln() - 2.0 * 0.5f64.ln()) / 2.0;
        assert_relative_eq!(bce_loss(&p, &t).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn clipping_keeps_loss_finite() {
        let p = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
        let t = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let l = bce_loss(&p, &t).unwrap();
        assert!(l.is_finite());
        assert_relative_eq!(l, -2.0 * BCE_EPSILON.ln(), max_relative = 1e-6);
        assert!(bce_grad(&p, &t).unwrap().all_finite());
    }

    #[test]
    fn gradient_matches_difference_quotient() {
        let p = Tensor::from_vec(&[2, 3], vec![0.3, 0.6, 0.1, 0.8, 0.45, 0.7]).unwrap();
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let g = bce_grad(&p, &t).unwrap();
        for i in 0..p.len() {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi.data_mut()[i] += 1e-6;
            lo.data_mut()[i] -= 1e-6;
            let fd = (bce_loss(&hi, &t).unwrap() - bce_loss(&lo, &t).unwrap()) / 2e-6;
            assert_relative_eq!(g.data()[i], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = Tensor::zeros(&[2, 3]);
        let t = Tensor::zeros(&[2, 4]);
        assert!(matches!(bce_loss(&p, &t), Err(Error::Shape { .. })));
    }
}
