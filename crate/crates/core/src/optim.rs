//! Adam with decoupled weight decay.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OptimError {
    #[error("parameter {index} has shape {param_rows}x{param_cols} but gradient is {grad_rows}x{grad_cols}")]
    ShapeMismatch {
        index: usize,
        param_rows: usize,
        param_cols: usize,
        grad_rows: usize,
        grad_cols: usize,
    },
    #[error("optimizer tracks {expected} parameters, got {actual}")]
    ParamCountMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

struct Moments<S> {
    first: Vec<S>,
    second: Vec<S>,
}

/// Adam optimizer; weight decay is applied directly to the parameters
/// (decoupled), not mixed into the gradient moments.
pub struct Adam<S> {
    config: AdamConfig,
    step: u64,
    moments: Vec<Moments<S>>,
}

impl<S: Scalar> Adam<S> {
    /// `shapes` fixes the parameter count and per-parameter moment shapes.
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        let moments = shapes
            .iter()
            .map(|&(r, c)| Moments { first: vec![S::zero(); r * c], second: vec![S::zero(); r * c] })
            .collect();
        Self { config, step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. Gradients may be `None` (parameter
    /// unused this step); such parameters still receive weight decay.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<S>],
        grads: &[Option<&Tensor<S>>],
    ) -> Result<(), OptimError> {
        if params.len() != self.moments.len() || grads.len() != self.moments.len() {
            return Err(OptimError::ParamCountMismatch {
                expected: self.moments.len(),
                actual: params.len().max(grads.len()),
            });
        }
        for (index, param) in params.iter().enumerate() {
            if let Some(g) = grads[index] {
                if g.shape() != param.shape() {
                    return Err(OptimError::ShapeMismatch {
                        index,
                        param_rows: param.rows(),
                        param_cols: param.cols(),
                        grad_rows: g.rows(),
                        grad_cols: g.cols(),
                    });
                }
            }
        }

        self.step += 1;
        let lr = S::from_f64_lossy(self.config.lr);
        let b1 = S::from_f64_lossy(self.config.beta1);
        let b2 = S::from_f64_lossy(self.config.beta2);
        let eps = S::from_f64_lossy(self.config.eps);
        let wd = S::from_f64_lossy(self.config.weight_decay);
        let bias1 = S::one() - S::from_f64_lossy(self.config.beta1.powi(self.step as i32));
        let bias2 = S::one() - S::from_f64_lossy(self.config.beta2.powi(self.step as i32));

        for ((param, grad), m) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            for (i, p) in param.values_mut().iter_mut().enumerate() {
                let g = grad.map_or(S::zero(), |g| g.values()[i]);
                m.first[i] = b1 * m.first[i] + (S::one() - b1) * g;
                m.second[i] = b2 * m.second[i] + (S::one() - b2) * g * g;
                let m_hat = m.first[i] / bias1;
                let v_hat = m.second[i] / bias2;
                *p = *p - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            }
        }
        Ok(())
    }
}
