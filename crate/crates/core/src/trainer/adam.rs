use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Param, ParamId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

/// Bias-corrected Adam with per-parameter step counters.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    state: HashMap<ParamId, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: HashMap::new(),
        }
    }

    pub fn state(&self, id: ParamId) -> Option<&AdamState> {
        self.state.get(&id)
    }

    /// Updates every parameter with its gradient. Nothing is modified if any
    /// gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { name: p.name.clone() });
            }
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (p, g) in params.iter_mut().zip(grads) {
            let st = self.state.entry(p.id()).or_insert_with(|| AdamState {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t as i32);
            let c2 = 1.0 - beta2.powi(st.t as i32);
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
