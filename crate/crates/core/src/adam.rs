//! Adam optimizer with bias correction.

use crate::error::NumericsError;
use crate::tensor::Tensor;

/// Per-parameter first/second moment buffers plus a shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Moment buffers are laid out positionally against the parameter list
    /// passed to every `step` call.
    pub fn new(lr: f64, param_sizes: &[usize]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected update over all parameters, reading each tensor's
    /// accumulated `grad` buffer. Missing grads count as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<(), NumericsError> {
        if params.len() != self.m.len() {
            return Err(NumericsError::BadShape {
                op: "adam_step",
                detail: format!("{} params, state holds {}", params.len(), self.m.len()),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if p.numel() != self.m[i].len() {
                return Err(NumericsError::BadShape {
                    op: "adam_step",
                    detail: format!(
                        "param {i} has {} values, moment buffer has {}",
                        p.numel(),
                        self.m[i].len()
                    ),
                });
            }
            let Some(grad) = p.grad.clone() else { continue };
            for (j, &g) in grad.iter().enumerate() {
                let m = &mut self.m[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                let v = &mut self.v[i][j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                p.data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            if !p.all_finite() {
                return Err(NumericsError::NonFinite { op: "adam_step" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = Tensor::new(vec![2], vec![1.5, -0.5]).unwrap().with_grad();
        let mut state = AdamState::new(0.002, &[2]);
        state.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data, vec![1.5, -0.5]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With g = 1 the bias-corrected update magnitude is lr/(1 + eps') ~ lr.
        let mut p = Tensor::scalar(0.0).with_grad();
        p.grad = Some(vec![1.0]);
        let mut state = AdamState::new(0.002, &[1]);
        state.step(&mut [&mut p]).unwrap();
        assert!((p.data[0] + 0.002).abs() < 1e-9, "got {}", p.data[0]);
    }

    #[test]
    fn repeated_steps_move_against_gradient() {
        let mut p = Tensor::scalar(1.0).with_grad();
        let mut state = AdamState::new(0.002, &[1]);
        let mut prev = p.data[0];
        for _ in 0..2 {
            p.grad = Some(vec![1.0]);
            state.step(&mut [&mut p]).unwrap();
            assert!(p.data[0] < prev);
            prev = p.data[0];
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::new(vec![3], vec![0.0; 3]).unwrap().with_grad();
        let mut state = AdamState::new(0.002, &[2]);
        assert!(state.step(&mut [&mut p]).is_err());
    }
}
