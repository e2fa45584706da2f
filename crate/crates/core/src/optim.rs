//! Adaptive-moment optimizer.

use std::collections::HashMap;

use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: ParamStore<T>,
    pub second: ParamStore<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            first: ParamStore::new(),
            second: ParamStore::new(),
        }
    }

    /// Applies one bias-corrected update to every parameter that has a gradient.
    /// Parameters without a gradient this step are left untouched.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &HashMap<String, Tensor<T>>) {
        self.step += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = T::of(self.lr * c2.sqrt() / c1);
        let eps = T::of(self.eps * c2.sqrt());
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = params.get_mut(&name).expect("name from store");
            if !self.first.contains(&name) {
                self.first.insert(name.clone(), Tensor::zeros(p.shape()));
                self.second.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let m = self.first.get_mut(&name).expect("inserted above");
            for (mv, &gv) in m.data_mut().iter_mut().zip(g.data()) {
                *mv = b1 * *mv + (one - b1) * gv;
            }
            let v = self.second.get_mut(&name).expect("inserted above");
            for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = b2 * *vv + (one - b2) * gv * gv;
            }
            let m = self.first.get(&name);
            let v = self.second.get(&name);
            for ((pv, &mv), &vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *pv -= step_size * mv / (vv.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = ParamStore::<f64>::new();
        params.insert("w", Tensor::from_f64(&[2], &[1.0, -1.0]));
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), Tensor::from_f64(&[2], &[0.3, -2.0]));
        let mut opt = Adam::new(0.1, 0.0, 0.99);
        opt.update(&mut params, &grads);
        let w = params.get("w").data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut params = ParamStore::<f64>::new();
        params.insert("w", Tensor::from_f64(&[1], &[3.0]));
        let mut opt = Adam::new(0.05, 0.9, 0.99);
        for _ in 0..500 {
            let w = params.get("w").data()[0];
            let mut grads = HashMap::new();
            grads.insert("w".to_string(), Tensor::from_f64(&[1], &[2.0 * w]));
            opt.update(&mut params, &grads);
        }
        assert!(params.get("w").data()[0].abs() < 0.05);
    }
}
