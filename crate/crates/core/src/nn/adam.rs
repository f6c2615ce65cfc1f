use alloc::vec::Vec;

use super::{ParameterSet, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for one [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParameterSet, config: AdamConfig) -> Self {
        let shapes = params.ids().map(|id| params.value(id).shape());
        let zeros: Vec<Tensor> = shapes.map(|[r, c]| Tensor::zeros(r, c)).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with the gradients stored in `params`, at `lr`.
    ///
    /// Gradients are validated before anything is modified, so a rejected step
    /// leaves both the parameters and the moments untouched.
    pub fn step_with_lr(&mut self, params: &mut ParameterSet, lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Invalid("optimizer built for a different parameter set".into()));
        }
        for id in params.ids() {
            if !params.grad(id).is_finite() {
                return Err(Error::NonFiniteGradient(params.name(id).into()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(beta1, t as f64);
        let bc2 = 1.0 - libm::pow(beta2, t as f64);
        for id in params.ids() {
            let i = id.index();
            let grad = params.grad(id).data().to_vec();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = params.value_mut(id).data_mut();
            for j in 0..w.len() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= lr * mhat / (libm::sqrt(vhat) + eps);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, lr)
    }
}
