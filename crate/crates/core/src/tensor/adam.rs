use serde::{Deserialize, Serialize};

use super::array::Tensor;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.first_moment.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first_moment.len(),
                store.len()
            )));
        }
        if let Some(p) = store.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient in {}", p.name)));
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - beta2.powi(self.step_count as i32);
        for ((p, m), v) in store
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            m.same_shape(&p.value)?;
            let md = m.data_mut();
            let vd = v.data_mut();
            let grad = p.grad.data();
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * g;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * g * g;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                *x -= learning_rate * mhat / (vhat.sqrt() + epsilon);
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }
}

/// Rescale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = store.iter().next().unwrap().value.clone();
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step(&mut store).unwrap();
        assert_eq!(store.iter().next().unwrap().value, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g² after bias correction, so Δ = −lr·g/(|g|+ε).
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(0.0));
        let mut adam = Adam::new(&store, AdamConfig::with_lr(0.01));
        store.get_mut(id).grad = Tensor::scalar(1.0);
        adam.step(&mut store).unwrap();
        let x = store.value(id).data()[0];
        assert!((x + 0.01 / (1.0 + 1e-8)).abs() < 1e-15, "{x}");
        assert_eq!(store.get(id).grad.data()[0], 0.0);
    }

    #[test]
    fn minimises_shifted_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(0.0));
        let mut adam = Adam::new(&store, AdamConfig::with_lr(0.05));
        for _ in 0..1000 {
            let x = store.value(id).data()[0];
            store.get_mut(id).grad = Tensor::scalar(2.0 * (x - 2.0));
            adam.step(&mut store).unwrap();
        }
        assert!((store.value(id).data()[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(0.0));
        store.get_mut(id).grad = Tensor::scalar(f64::NAN);
        let mut adam = Adam::new(&store, AdamConfig::default());
        assert!(matches!(adam.step(&mut store), Err(Error::Numeric(_))));
    }
}
