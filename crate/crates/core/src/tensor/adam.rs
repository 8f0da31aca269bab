//! Adam with bias correction.

use std::collections::BTreeMap;

use super::{Array, Bindings, TensorError};

/// Optimizer state for one named parameter group. Moments are allocated to
/// match parameter shapes on the first step and must stay shape-stable.
#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    group: Vec<String>,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, group: Vec<String>) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            group,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the whole group. Every group member must appear in
    /// both `params` and `grads`.
    pub fn step(
        &mut self,
        params: &mut Bindings,
        grads: &Bindings,
    ) -> Result<(), TensorError> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for name in &self.group {
            let p: &mut Array = params
                .get_mut(name)
                .ok_or_else(|| TensorError::UnknownParameter(name.clone()))?;
            let g = grads
                .get(name)
                .ok_or_else(|| TensorError::MissingGradient(name.clone()))?;
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let pd = p.data_mut();
            let gd = g.data();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gd[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pd[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
