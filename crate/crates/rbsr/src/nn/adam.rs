//! Trainable parameters and the Adam update rule.

use crate::nn::tensor::{Scalar, Tensor4};

/// A named weight with its gradient and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
    pub m: Tensor4<T>,
    pub v: Tensor4<T>,
    /// Completed optimizer updates.
    pub step: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor4<T>) -> Self {
        let grad = Tensor4::zeros_like(&value);
        let m = Tensor4::zeros_like(&value);
        let v = Tensor4::zeros_like(&value);
        Self {
            name: name.into(),
            value,
            grad,
            m,
            v,
            step: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update:
/// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;
/// value <- value - lr * m_hat / (sqrt(v_hat) + eps).
pub fn adam_step<T: Scalar>(param: &mut Parameter<T>, config: &AdamConfig) {
    param.step += 1;
    let b1 = T::from_f64(config.beta1);
    let b2 = T::from_f64(config.beta2);
    let lr = T::from_f64(config.lr);
    let eps = T::from_f64(config.eps);
    let one = T::one();
    let bc1 = one - T::from_f64(config.beta1.powi(param.step as i32));
    let bc2 = one - T::from_f64(config.beta2.powi(param.step as i32));
    for i in 0..param.value.data.len() {
        let g = param.grad.data[i];
        let m = b1 * param.m.data[i] + (one - b1) * g;
        let v = b2 * param.v.data[i] + (one - b2) * g * g;
        param.m.data[i] = m;
        param.v.data[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        param.value.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(g: f64) -> Parameter<f64> {
        let mut p = Parameter::new("p", Tensor4::scalar(1.0));
        p.grad = Tensor4::scalar(g);
        p
    }

    #[test]
    fn zero_grad_leaves_value() {
        let mut p = scalar_param(0.0);
        adam_step(&mut p, &AdamConfig::with_lr(1e-4));
        assert_eq!(p.value.data[0], 1.0);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn first_step_with_unit_grad() {
        // m_hat = v_hat = 1 on the first bias-corrected step, so
        // delta = -lr / (1 + eps).
        let mut p = scalar_param(1.0);
        adam_step(&mut p, &AdamConfig::with_lr(1e-4));
        let expected = 1.0 - 1e-4 / (1.0 + 1e-8);
        assert!((p.value.data[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        let cfg = AdamConfig::with_lr(1e-3);
        let mut p = scalar_param(1.0);
        adam_step(&mut p, &cfg);
        p.grad = Tensor4::scalar(1.0);
        adam_step(&mut p, &cfg);

        // Hand evaluation of the recurrence with g = 1 both steps.
        let (b1, b2, lr, eps): (f64, f64, f64, f64) = (0.9, 0.999, 1e-3, 1e-8);
        let mut value = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for step in 1..=2i32 {
            m = b1 * m + (1.0 - b1) * 1.0;
            v = b2 * v + (1.0 - b2) * 1.0;
            let m_hat = m / (1.0 - b1.powi(step));
            let v_hat = v / (1.0 - b2.powi(step));
            value -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        assert!((p.value.data[0] - value).abs() < 1e-15);
    }

    #[test]
    fn lr_zero_advances_moments_only() {
        let mut p = scalar_param(0.7);
        let before = p.value.clone();
        adam_step(&mut p, &AdamConfig::with_lr(0.0));
        assert_eq!(p.value, before);
        assert_eq!(p.step, 1);
        assert!(p.m.data[0] != 0.0 && p.v.data[0] != 0.0);
    }
}
