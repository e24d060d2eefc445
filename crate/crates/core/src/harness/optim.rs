//! AdamW: adaptive moments with bias correction and decoupled weight decay.

use crate::error::{Result, SimvaError};
use crate::params::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: ParameterStore,
    v: ParameterStore,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParameterStore) -> Self {
        AdamW {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update: `p <- p - lr * (wd * p + m_hat / (sqrt(v_hat) + eps))`.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &ParameterStore) -> Result<()> {
        let diff = params.structural_diff(grads);
        if !diff.is_empty() {
            return Err(SimvaError::Structural { keys: diff });
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in &names {
            let g = grads.get(name)?.data();
            let m = self.m.values_mut(name)?;
            let v = self.v.values_mut(name)?;
            let p = params.values_mut(name)?;
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                p[i] -= c.lr * (c.weight_decay * p[i] + update);
            }
        }
        Ok(())
    }
}
