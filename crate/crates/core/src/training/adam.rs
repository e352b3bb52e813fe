use crate::error::{Error, Result};
use crate::numerics::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    learning_rate: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update. `grads` must follow the store's name order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let data = p.data_mut();
            if data.len() != g.len() || m.len() != g.len() {
                return Err(Error::Contract("gradient size does not match parameter".into()));
            }
            for i in 0..g.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Bias-corrected first step is lr * g / (|g| + eps): magnitude ~lr against the gradient sign.
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -1.0, 0.0]).unwrap());
        let mut adam = Adam::new(0.1);
        adam.step(&mut store, &[vec![2.0, -0.5, 0.0]]).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 0.9).abs() < 1e-7);
        assert_eq!(w[2], 0.0);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![3.0]).unwrap());
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let x = store.get("x").unwrap().data()[0];
            adam.step(&mut store, &[vec![2.0 * (x - 1.0)]]).unwrap();
        }
        assert!((store.get("x").unwrap().data()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![3.0]).unwrap());
        let mut adam = Adam::new(0.1);
        assert!(adam.step(&mut store, &[]).is_err());
        assert!(adam.step(&mut store, &[vec![1.0, 2.0]]).is_err());
    }
}
