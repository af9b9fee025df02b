//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter from its accumulated
    /// gradient. Gradients are left untouched; call `zero_grad` separately.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, value, grad, trainable) in store.iter_mut_with_grad() {
            if !trainable {
                continue;
            }
            let (m, v) = self.moments.entry(name.to_string()).or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for i in 0..value.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * weight_decay * value[i];
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_only_decays() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() });
        opt.step(&mut store);
        assert_eq!(store.value("w").unwrap().data(), &[0.95, -1.9]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[1], vec![0.0]).unwrap()).unwrap();
        store.accumulate("w", &[3.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.01, weight_decay: 0.0, ..Default::default() });
        opt.step(&mut store);
        assert!((store.value("w").unwrap().data()[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        store.insert("enc.w", Tensor::new(&[1], vec![1.0]).unwrap()).unwrap();
        store.accumulate("enc.w", &[1.0]).unwrap();
        store.set_trainable_prefix("enc.", false);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store);
        assert_eq!(store.value("enc.w").unwrap().data(), &[1.0]);
    }
}
