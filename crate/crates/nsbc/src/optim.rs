//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state for a parameter list, with the usual beta/epsilon defaults.
    pub fn new(learning_rate: T, params: &[Tensor<T>]) -> Self {
        AdamState {
            learning_rate,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            epsilon: T::from_f64(1e-8),
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over all parameters, in declaration order.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::shape(
                "adam_update",
                format!(
                    "{} params, {} grads, state for {}",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            ));
        }
        for (p, g) in params.iter().zip(grads.iter()) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_update",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let one = T::one();
        let b1 = self.beta1;
        let b2 = self.beta2;
        let corr1 = one - b1.powi(self.step as i32);
        let corr2 = one - b2.powi(self.step as i32);
        for i in 0..params.len() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let pd = params[i].data_mut();
            let gd = grads[i].data();
            for j in 0..pd.len() {
                m[j] = b1 * m[j] + (one - b1) * gd[j];
                v[j] = b2 * v[j] + (one - b2) * gd[j] * gd[j];
                let m_hat = m[j] / corr1;
                let v_hat = v[j] / corr2;
                pd[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Vec<Tensor<f64>> {
        vec![Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()]
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = params();
        let before = p.clone();
        let mut state = AdamState::new(0.1, &p);
        let grads = vec![Tensor::zeros(&[2])];
        state.update(&mut p, &grads).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut p = params();
        let lr = 0.05;
        let mut state = AdamState::new(lr, &p);
        let grads = vec![Tensor::new(vec![2], vec![3.0, -0.7]).unwrap()];
        state.update(&mut p, &grads).unwrap();
        // bias-corrected first step: m_hat = g, v_hat = g^2, so the update is
        // lr * g / (|g| + eps) ~= lr * sign(g)
        assert!((p[0].data()[0] - (1.0 - lr)).abs() < 1e-8);
        assert!((p[0].data()[1] - (-2.0 + lr)).abs() < 1e-8);
    }

    #[test]
    fn update_is_deterministic() {
        let grads = vec![Tensor::new(vec![2], vec![0.3, 0.9]).unwrap()];
        let run = || {
            let mut p = params();
            let mut state = AdamState::new(0.01, &p);
            for _ in 0..5 {
                state.update(&mut p, &grads).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut p = params();
        let mut state = AdamState::new(0.1, &p);
        let grads = vec![Tensor::zeros(&[3])];
        assert!(state.update(&mut p, &grads).is_err());
    }
}
