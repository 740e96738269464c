//! Mini-batch SGD with optional momentum.

use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f32,
    pub momentum: f32,
    /// One buffer per parameter tensor, same shapes.
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(learning_rate: f32, momentum: f32, params: &[Tensor]) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(TensorError::InvalidLayer(format!(
                "learning rate {learning_rate} must be finite and non-negative"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(TensorError::InvalidLayer(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        })
    }
}

/// Applies one update from gradients summed over `batch` samples.
///
/// With zero momentum this is `w - (lr / batch) * grads_sum`. Otherwise the
/// velocity recurrence `v = momentum * v + grads_sum / batch; w -= lr * v` is used.
pub fn sgd_step(
    params: &mut [Tensor],
    grads_sum: &[Tensor],
    batch: usize,
    opt: &mut OptimizerState,
) -> Result<()> {
    if params.len() != grads_sum.len() || params.len() != opt.velocity.len() {
        return Err(TensorError::InvalidLayer(format!(
            "{} params, {} grads, {} velocity buffers",
            params.len(),
            grads_sum.len(),
            opt.velocity.len()
        )));
    }
    if batch == 0 {
        return Err(TensorError::InvalidLayer("batch size must be positive".into()));
    }
    for ((p, g), v) in params.iter().zip(grads_sum).zip(&opt.velocity) {
        g.expect_shape(p.shape())?;
        v.expect_shape(p.shape())?;
    }
    let lr = opt.learning_rate;
    let n = batch as f32;
    if opt.momentum == 0.0 {
        let scale = lr / n;
        for (p, g) in params.iter_mut().zip(grads_sum) {
            for (w, gi) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= scale * gi;
            }
        }
    } else {
        let mu = opt.momentum;
        for ((p, g), v) in params.iter_mut().zip(grads_sum).zip(opt.velocity.iter_mut()) {
            for ((w, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi + gi / n;
                *w -= lr * *vi;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_arithmetic() {
        let mut w = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(2.0)];
        let mut opt = OptimizerState::new(0.1, 0.0, &w).unwrap();
        sgd_step(&mut w, &g, 2, &mut opt).unwrap();
        assert_eq!(w[0].data(), &[0.9]);
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        for mu in [0.0, 0.9] {
            let mut w = vec![Tensor::vector(vec![0.3, -1.7, 2.0])];
            let before = w.clone();
            let g = vec![Tensor::vector(vec![5.0, 6.0, -7.0])];
            let mut opt = OptimizerState::new(0.0, mu, &w).unwrap();
            sgd_step(&mut w, &g, 3, &mut opt).unwrap();
            assert_eq!(w, before);
        }
    }

    #[test]
    fn momentum_matches_scalar_recurrence() {
        let (lr, mu, n) = (0.05f32, 0.9f32, 4usize);
        let grads = [3.0f32, -1.5];
        let mut w = vec![Tensor::scalar(0.7)];
        let mut opt = OptimizerState::new(lr, mu, &w).unwrap();
        let (mut ws, mut vs) = (0.7f32, 0.0f32);
        for g in grads {
            sgd_step(&mut w, &[Tensor::scalar(g)], n, &mut opt).unwrap();
            vs = mu * vs + g / n as f32;
            ws -= lr * vs;
        }
        assert!((w[0].data()[0] - ws).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut w = vec![Tensor::zeros(&[2])];
        let mut opt = OptimizerState::new(0.1, 0.0, &w).unwrap();
        assert!(matches!(
            sgd_step(&mut w, &[Tensor::zeros(&[3])], 1, &mut opt),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }
}
