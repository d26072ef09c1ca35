//! Adam with classic L2 regularization (the penalty gradient is added to the
//! loss gradient before the moment updates, not decoupled).

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 0.0,
        }
    }
}

/// Per-parameter optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(numel: usize, config: AdamConfig) -> Self {
        AdamState {
            first_moment: vec![0.0; numel],
            second_moment: vec![0.0; numel],
            step_count: 0,
            config,
        }
    }
}

/// Applies one bias-corrected Adam update to `param` using its stored gradient.
pub fn adam_step(param: &mut Tensor, state: &mut AdamState, name: &str) -> Result<()> {
    let n = param.numel();
    if state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            lhs: param.shape().to_vec(),
            rhs: vec![state.first_moment.len()],
        });
    }
    let grad = param
        .grad()
        .ok_or_else(|| TensorError::MissingGrad(name.to_string()))?
        .to_vec();
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
        l2,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let data = param.data_mut();
    for i in 0..n {
        let g = grad[i] + l2 * data[i];
        let m = beta1 * state.first_moment[i] + (1.0 - beta1) * g;
        let v = beta2 * state.second_moment[i] + (1.0 - beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        data[i] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
    }
    Ok(())
}

/// Adam over every trainable tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let states = store
            .iter()
            .map(|(_, t)| AdamState::new(t.numel(), config))
            .collect();
        Adam { config, states }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }

    /// Updates every parameter that requires grad. Parameters that received
    /// no gradient this step are treated as having a zero loss gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let param = store.get_mut(id);
            if !param.requires_grad() {
                continue;
            }
            if param.grad().is_none() {
                let zeros = vec![0.0; param.numel()];
                param.accumulate_grad(&zeros, 1.0)?;
            }
            adam_step(param, &mut self.states[id.index()], &name)?;
        }
        Ok(())
    }
}
