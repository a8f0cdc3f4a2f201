use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        // Validate before mutating anything.
        for id in store.ids() {
            let grad = grads
                .get(id)
                .ok_or_else(|| Error::MissingGradient(store.get(id).name.clone()))?;
            if grad.shape() != store.value(id).shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: store.value(id).shape(),
                    rhs: grad.shape(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for id in store.ids() {
            let grad = grads.get(id).expect("validated").as_slice();
            let m = self.first[id.index()].as_mut_slice();
            let v = self.second[id.index()].as_mut_slice();
            let p = store.value_mut(id).as_mut_slice();
            for i in 0..p.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("p", "test", Matrix::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = scalar_store(0.37);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        for _ in 0..5 {
            let zero = Gradients::zeros(&store);
            adam.step(&mut store, &zero).unwrap();
        }
        assert_eq!(store.value(store.id("p").unwrap()).item(), 0.37);
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε) ≈ lr.
        let mut store = scalar_store(1.0);
        let id = store.id("p").unwrap();
        let mut adam = AdamState::new(
            &store,
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
        );
        let mut g = Gradients::empty(&store);
        g.set(id, Matrix::scalar(1.0));
        adam.step(&mut store, &g).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((store.value(id).item() - expected).abs() < 1e-15);
        assert!((store.value(id).item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut store = scalar_store(1.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let empty = Gradients::empty(&store);
        let err = adam.step(&mut store, &empty).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "p"));
        assert_eq!(adam.steps(), 0);
    }
}
