use crate::error::{Result, TensorError};
use crate::ops::OpKind;
use crate::param::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub hyper: AdamConfig,
}

impl AdamState {
    pub fn new(store: &ParamStore, hyper: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self { first_moment: zeros.clone(), second_moment: zeros, step_count: 0, hyper }
    }

    /// One bias-corrected Adam update of `store` in place.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != store.len() || self.first_moment.len() != store.len() {
            return Err(TensorError::ShapeMismatch { op: OpKind::Sub, lhs: vec![store.len()], rhs: vec![grads.len()] });
        }
        for ((param, g), m) in store.iter().zip(grads).zip(&self.first_moment) {
            if g.len() != param.data.len() || m.len() != param.data.len() {
                return Err(TensorError::ParamLength {
                    name: param.name.clone(),
                    expected: param.data.len(),
                    got: g.len(),
                });
            }
        }
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, epsilon } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - beta2.powi(self.step_count as i32);
        for (((param, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.first_moment).zip(&mut self.second_moment)
        {
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param.data[i] -= lr * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

pub fn adam_step(store: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState) -> Result<()> {
    state.step(store, grads)
}
