use serde::{Deserialize, Serialize};

use crate::networks::ParamSet;
use crate::tensor::{Real, Tensor};

pub const ADAM_BETA1: f64 = 0.0;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    hyper: AdamHyper,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(hyper: AdamHyper, params: &ParamSet<T>) -> Self {
        let zeros = || params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            hyper,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_parts(hyper: AdamHyper, t: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Self {
        Adam { hyper, t, m, v }
    }

    pub fn hyper(&self) -> AdamHyper {
        self.hyper
    }

    pub fn lr(&self) -> f64 {
        self.hyper.lr
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// One update. A zero gradient leaves the parameter bit-for-bit unchanged.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.t += 1;
        let AdamHyper { lr, beta1, beta2, eps } = self.hyper;
        let bc1 = T::c(1.0 - beta1.powi(self.t as i32));
        let bc2 = T::c(1.0 - beta2.powi(self.t as i32));
        let (b1, b2, lr, eps) = (T::c(beta1), T::c(beta2), T::c(lr), T::c(eps));
        let one = T::one();
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                *w = *w - update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ParamSet<f64> {
        let mut p = ParamSet::default();
        p.push("w".into(), Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first update is lr * g / (|g| + eps)
        let mut p = params();
        let mut opt = Adam::new(AdamHyper::new(0.01), &p);
        opt.step(&mut p, &[Tensor::new(vec![3], vec![2.0, -3.0, 0.0])]);
        let w = p.tensors()[0].data();
        assert!((w[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((w[1] - (-2.0 + 0.01)).abs() < 1e-9);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn zero_gradient_is_bitwise_noop() {
        let mut p = params();
        let before = p.clone();
        let mut opt = Adam::new(AdamHyper::new(0.004), &p);
        for _ in 0..3 {
            opt.step(&mut p, &[Tensor::zeros(&[3])]);
        }
        assert_eq!(p, before);
    }
}
