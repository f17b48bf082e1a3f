use serde::{Deserialize, Serialize};

use super::{Gradients, PredictorModel};
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    first: Vec<Vec<f64>>,
    #[serde(skip)]
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update to `params` given `grads` (matched by position).
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn update(&mut self, params: &mut [(String, &mut [f64])], grads: &[(String, &[f64])]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape("parameter and gradient lists differ".into()));
        }
        for ((name, p), (_, g)) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::Shape(format!("gradient for `{name}` has the wrong size")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        if self.first.len() != params.len() {
            self.first = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, ((_, p), (_, g))) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One Adam step on every trainable parameter of `model`. The PAD embedding
/// row is reset to zero afterwards.
pub fn adam_step(model: &mut PredictorModel, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    let grads = grads.tensors();
    let mut params = model.params_mut();
    state.update(&mut params, &grads)?;
    model.zero_pad_row();
    Ok(())
}
