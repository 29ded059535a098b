use serde::{Deserialize, Serialize};

use crate::error::{FlockError, Result};
use crate::nn::mlp::MlpParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: MlpParams,
    v: MlpParams,
    t: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// In-place bias-corrected Adam update.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpParams) -> Result<()> {
        let n = params.as_slice().len();
        if grads.as_slice().len() != n || self.m.as_slice().len() != n {
            return Err(FlockError::Dimension(format!(
                "adam: {} parameters, {} gradients, {} moments",
                n,
                grads.as_slice().len(),
                self.m.as_slice().len()
            )));
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        let theta = params.as_mut_slice();
        let m = self.m.as_mut_slice();
        let v = self.v.as_mut_slice();
        for (((p, &g), m), v) in theta.iter_mut().zip(grads.as_slice()).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(params: &MlpParams, grads: &MlpParams, state: &AdamState) -> Result<(MlpParams, AdamState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    s.step(&mut p, grads)?;
    Ok((p, s))
}
