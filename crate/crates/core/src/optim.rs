//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Real>(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self { config, step: 0, first: zeros(), second: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, epsilon: eps } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if !p.trainable {
                continue;
            }
            let grads = p.grad.data().to_vec();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.f64();
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *w = T::of(w.f64() - update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(v: f32, g: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::full(&[3], v), true).unwrap();
        s.get_mut(id).grad.data_mut().fill(g);
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = store(0.25, 0.0);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        for _ in 0..10 {
            adam.step(&mut s);
        }
        assert!(s.iter().next().unwrap().value.data().iter().all(|v| *v == 0.25));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [1e-3f32, 0.5, -7.0] {
            let mut s = store(1.0, g);
            let mut adam = AdamState::new(&s, AdamConfig::default());
            adam.step(&mut s);
            let moved = s.iter().next().unwrap().value.data()[0] as f64 - 1.0;
            assert!((moved + 1e-3 * (g as f64).signum()).abs() < 1e-6, "g={g} moved={moved}");
        }
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut s = store(0.0, 2.0);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        for _ in 0..50 {
            adam.step(&mut s);
        }
        assert!(s.iter().next().unwrap().value.data()[0] < -0.04);
        assert_eq!(adam.steps(), 50);
    }

    #[test]
    fn frozen_entries_are_skipped() {
        let mut s = ParamStore::<f32>::new();
        let id = s.register("running", Tensor::full(&[2], 1.0), false).unwrap();
        s.get_mut(id).grad.data_mut().fill(5.0);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.step(&mut s);
        assert_eq!(s.value(id).data(), &[1.0, 1.0]);
    }
}
