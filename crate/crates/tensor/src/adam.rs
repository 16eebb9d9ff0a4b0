//! Adam with bias-corrected moment estimates.

use crate::error::{Result, TensorError};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Optimiser state: one pair of moment buffers per parameter, in store order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Adam { config, first: zeros.clone(), second: zeros, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update from the gradients held in `store`. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(TensorError::Config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        for (i, (id, name, t)) in store.iter().enumerate() {
            if self.first[i].len() != t.numel() {
                return Err(TensorError::Config(format!(
                    "moment buffer for `{name}` ({id:?}) has {} elements, parameter has {}",
                    self.first[i].len(),
                    t.numel()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let t = store.get_mut(id);
            let Some(grad) = t.grad().map(|g| g.to_vec()) else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let gj = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        store.get_mut(id).accumulate_grad(&[0.0; 3]).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &store);
        adam.step(&mut store).unwrap();
        assert_eq!(store.get(id).data(), &[1.0, -2.0, 0.5]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn store_growth_is_a_config_error() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::zeros([2])).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        store.add("q", Tensor::zeros([2])).unwrap();
        assert!(matches!(adam.step(&mut store), Err(TensorError::Config(_))));
    }

    #[test]
    fn resized_parameter_is_a_config_error() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::zeros([2])).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let mut other = ParamStore::new();
        other.add("p", Tensor::zeros([3])).unwrap();
        let _ = id;
        assert!(matches!(adam.step(&mut other), Err(TensorError::Config(_))));
    }
}
