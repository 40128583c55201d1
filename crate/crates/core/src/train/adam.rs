use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::model::Params;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, kept in `f64`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected update of a single tensor at step `t` (1-based).
pub fn adam_update<T: Real>(param: &mut [T], grad: &[T], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i].to_f64_lossy();
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let step = cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        param[i] = T::from_f64_lossy(param[i].to_f64_lossy() - step);
    }
}

/// Applies one Adam step to every parameter. `grads` must hold a gradient of
/// matching length for each parameter.
pub fn adam_step(
    params: &mut Params,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, t) in params.iter() {
        match grads.get(name) {
            Some(g) if g.len() == t.len() => {}
            Some(g) => {
                return Err(TrainError::GradShape {
                    name: name.to_string(),
                    expected: t.len(),
                    got: g.len(),
                })
            }
            None => return Err(TrainError::MissingGrad(name.to_string())),
        }
    }
    state.t += 1;
    for (name, t) in params.iter_mut() {
        let n = t.len();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        adam_update(t.data_mut(), &grads[name], m, v, state.t, cfg);
    }
    Ok(())
}
