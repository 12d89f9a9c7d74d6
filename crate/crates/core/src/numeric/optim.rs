use serde::{Deserialize, Serialize};

use super::{NumericError, ParamStore};

/// Adaptive-moment optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `store`, then clears them.
    ///
    /// A non-finite gradient aborts the step before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), NumericError> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.all_finite()) {
            return Err(NumericError::NonFiniteGradient(p.name.clone()));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                value[j] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
            if !p.value.all_finite() {
                return Err(NumericError::NonFiniteGradient(p.name.clone()));
            }
        }
        store.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Graph, Init};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_store(v: f64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.add("w", &[1], Init::Constant(v), &mut rng);
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = scalar_store(1.25);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        opt.step(&mut store).unwrap();
        assert_eq!(store.by_name("w").unwrap().value.item(), 1.25);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut store = scalar_store(0.0);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        for _ in 0..50 {
            store.get_mut(store.id("w").unwrap()).grad.data_mut()[0] = 2.0;
            opt.step(&mut store).unwrap();
        }
        assert!(store.by_name("w").unwrap().value.item() < 0.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = (w - 2)^2 with lr 0.1 for 200 steps.
        let mut store = scalar_store(0.0);
        let id = store.id("w").unwrap();
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &store);
        for _ in 0..200 {
            let mut g = Graph::eval();
            let w = g.param(&store, id);
            let d = g.add_scalar(w, -2.0);
            let sq = g.mul(d, d).unwrap();
            let loss = g.sum(sq);
            g.backward(loss).unwrap().accumulate_into(&mut store);
            opt.step(&mut store).unwrap();
        }
        let w = store.get(id).value.item();
        assert!((w - 2.0).abs() < 1e-2, "w = {w}");
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut store = scalar_store(1.0);
        store.get_mut(store.id("w").unwrap()).grad.data_mut()[0] = f64::NAN;
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let err = opt.step(&mut store).unwrap_err();
        assert!(matches!(err, NumericError::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(store.by_name("w").unwrap().value.item(), 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }
}
