//! Adam with decoupled weight decay.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Optimizer state for one flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    settings: AdamSettings,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(settings: AdamSettings, n_params: usize) -> Self {
        Adam {
            settings,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update in place. Decay is applied to the weights directly
    /// (`p <- p - lr*wd*p`) before the moment-based step, never folded into the gradient.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.first.len() || grad.len() != self.first.len() {
            return Err(Error::dim(
                "adam",
                format!(
                    "state has {} entries, params {}, grad {}",
                    self.first.len(),
                    params.len(),
                    grad.len()
                ),
            ));
        }
        let s = self.settings;
        self.steps += 1;
        let c1 = 1.0 - s.beta1.powi(self.steps as i32);
        let c2 = 1.0 - s.beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.first[i] = s.beta1 * self.first[i] + (1.0 - s.beta1) * g;
            self.second[i] = s.beta2 * self.second[i] + (1.0 - s.beta2) * g * g;
            let m_hat = self.first[i] / c1;
            let v_hat = self.second[i] / c2;
            params[i] -= s.lr * s.weight_decay * params[i];
            params[i] -= s.lr * m_hat / (v_hat.sqrt() + s.eps);
        }
        Ok(())
    }
}
