use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{GradBuffer, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Tensor,
    pub v: Tensor,
}

impl AdamMoments {
    pub fn zeros_like(t: &Tensor) -> Self {
        AdamMoments {
            m: Tensor::zeros(t.shape()),
            v: Tensor::zeros(t.shape()),
        }
    }
}

/// One bias-corrected Adam update. `step` is the 1-based index of this
/// update; `lr` overrides `cfg.lr` so schedules can scale it.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamMoments,
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape("adam_step", param.shape(), grad.shape()));
    }
    if state.m.shape() != param.shape() || state.v.shape() != param.shape() {
        return Err(Error::shape("adam_step", param.shape(), state.m.shape()));
    }
    if step == 0 {
        return Err(Error::Config("adam step index is 1-based".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over every tensor of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub moments: Vec<AdamMoments>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: store.ids().map(|id| AdamMoments::zeros_like(store.get(id))).collect(),
        }
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient in `grads` are treated as having a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) -> Result<()> {
        if self.moments.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, store has {}",
                self.moments.len(),
                store.len()
            )));
        }
        self.step += 1;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let zero;
            let g = match grads.get(id) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(store.get(id).shape());
                    &zero
                }
            };
            adam_step(store.get_mut(id), g, &mut self.moments[id.index()], self.step, lr, &self.cfg)?;
        }
        Ok(())
    }
}
