use std::collections::BTreeMap;

use super::params::ParameterStore;
use super::tensor::Tensor;

/// Adaptive-moment optimizer with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    moments: BTreeMap<String, (Tensor, Tensor, u64)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            betas: (0.9, 0.999),
            eps: 1e-8,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.betas = (beta1, beta2);
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    ///
    /// A parameter whose gradient is exactly zero everywhere is skipped
    /// entirely (its moments and step count are left alone), so a step with
    /// no gradient signal leaves the parameters untouched.
    pub fn step(&mut self, params: &mut ParameterStore) {
        let (b1, b2) = self.betas;
        for (name, value, grad) in params.values_and_grads_mut() {
            if grad.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let (m, v, t) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(value.shape()), Tensor::zeros(value.shape()), 0));
            *t += 1;
            let bc1 = 1.0 - b1.powi(*t as i32);
            let bc2 = 1.0 - b2.powi(*t as i32);
            for (((p, g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            grad.fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::scalar(2.0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&s, "x").unwrap();
        let l = tape.sum(x);
        s.accumulate(&tape.backward(l).unwrap());
        let mut opt = Adam::new(0.1);
        opt.step(&mut s);
        let moved = 2.0 - s.get("x").unwrap().item();
        assert!((moved - 0.1).abs() < 1e-7, "moved {moved}");
        assert_eq!(s.grad("x").unwrap().item(), 0.0);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::vector(vec![1.0, -2.0, 3.5])).unwrap();
        let before = s.clone();
        let mut opt = Adam::default();
        opt.step(&mut s);
        assert_eq!(s, before);
    }
}
