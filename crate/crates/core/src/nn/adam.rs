use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_eta(eta: f64) -> Self {
        Self { eta, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { eta: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment estimates for one optimized [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    /// Number of completed steps.
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(template: &ParamSet, config: AdamConfig) -> Self {
        Self { m: template.zeros_like(), v: template.zeros_like(), t: 0, config }
    }

    /// Applies one bias-corrected Adam update to `params` in place.
    ///
    /// Gradients are checked before anything is modified, so on error both
    /// `params` and the state are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(Error::Internal("adam: parameter/gradient layout mismatch".into()));
        }
        for (name, g) in grads.entries() {
            if let Some(i) = g.values().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} at {name}[{i}] (step {})",
                    g.values()[i],
                    self.t + 1
                )));
            }
        }
        let AdamConfig { eta, beta1, beta2, epsilon } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for e in 0..params.len() {
            let g = grads.tensor(e).values();
            let m = self.m.tensor_mut(e).values_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = self.v.tensor_mut(e).values_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let (m, v) = (self.m.tensor(e).values(), self.v.tensor(e).values());
            let w = params.tensor_mut(e).values_mut();
            for ((wi, &mi), &vi) in w.iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *wi -= eta * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Pure form of [`AdamState::step`].
pub fn adam_step(
    params: &ParamSet,
    grads: &ParamSet,
    state: &AdamState,
) -> Result<(ParamSet, AdamState)> {
    let mut params = params.clone();
    let mut state = state.clone();
    state.step(&mut params, grads)?;
    Ok((params, state))
}
