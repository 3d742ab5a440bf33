//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use sesa_core::nn::ParamStore;
use sesa_core::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed steps.
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update of a flat parameter vector with its gradient.
    pub fn update(&mut self, name: &str, theta: &mut [f64], grad: &[f64], t: u64) {
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; theta.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; theta.len()]);
        let c1 = 1.0 - self.beta1.powi(t as i32);
        let c2 = 1.0 - self.beta2.powi(t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            theta[i] *= 1.0 - self.lr * self.weight_decay;
            theta[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
        }
    }

    /// Steps every trainable tensor in `params` using its accumulated
    /// gradient (zero if none reached it), replacing it by a fresh leaf.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.t += 1;
        let t = self.t;
        for (name, p) in params.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let grad = p.grad_or_zeros();
            let mut theta = p.to_vec();
            self.update(name, &mut theta, &grad, t);
            *p = Tensor::from_vec(p.shape(), theta).expect("same shape").param();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut o = AdamW::new(0.1, 0.0);
        let mut th = [1.0, -2.0, 0.5];
        o.update("p", &mut th, &[3.0, -0.5, 0.0], 1);
        // eps shifts each step by about lr * eps / |g|
        assert!((th[0] - 0.9).abs() < 1e-8);
        assert!((th[1] + 1.9).abs() < 1e-8);
        assert_eq!(th[2], 0.5);
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        let mut o = AdamW::new(0.1, 0.5);
        let mut th = [2.0];
        o.update("p", &mut th, &[0.0], 1);
        assert!((th[0] - 2.0 * 0.95).abs() < 1e-15);
    }
}
