//! Adam optimizer over visited parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RrnError};
use crate::nn::tensor::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state; per-parameter moments live inside each [`Param`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    /// Global step counter, shared by all parameters.
    pub step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0 }
    }

    /// Applies one update to a single parameter using the already
    /// incremented step counter.
    pub fn update_param(&self, name: &str, param: &mut Param) -> Result<()> {
        let Some(grad) = param.grad.as_ref() else {
            return Ok(()); // parameter did not participate in this step
        };
        if grad.data.iter().any(|g| !g.is_finite()) {
            return Err(RrnError::Training(format!(
                "non-finite gradient in parameter '{name}'"
            )));
        }
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..grad.data.len() {
            let g = grad.data[i];
            param.m.data[i] = c.beta1 * param.m.data[i] + (1.0 - c.beta1) * g;
            param.v.data[i] = c.beta2 * param.v.data[i] + (1.0 - c.beta2) * g * g;
            let m_hat = param.m.data[i] / bc1;
            let v_hat = param.v.data[i] / bc2;
            param.value.data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }

    /// Increments the step counter; call once per optimization step before
    /// visiting parameters.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }
}
