use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moments and step counter for every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub(crate) first: BTreeMap<String, Vec<f64>>,
    pub(crate) second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }

    pub(crate) fn set_moments(&mut self, name: String, m: Vec<f64>, v: Vec<f64>) {
        self.first.insert(name.clone(), m);
        self.second.insert(name, v);
    }

    pub(crate) fn names(&self) -> impl Iterator<Item = &String> {
        self.first.keys()
    }
}

/// One AdamW update over every `requires_grad` entry of `params`.
///
/// Weight decay is decoupled (`p -= lr * wd * p`) and applied before the
/// bias-corrected Adam step. Gradients are left in place.
pub fn adamw_step(params: &mut ParamSet, state: &mut OptimizerState) -> Result<()> {
    let c = state.config;
    for (name, p) in params.iter() {
        if p.requires_grad() && p.grad().is_none() {
            return Err(Error::Contract(format!("parameter `{name}` has no gradient")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        if !p.requires_grad() {
            continue;
        }
        let n = p.numel();
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        if m.len() != n || v.len() != n {
            return Err(Error::Dimension(format!(
                "optimizer moments for `{name}` have {} entries, parameter has {n}",
                m.len()
            )));
        }
        let g = p.take_grad().expect("checked above");
        let data = p.data_mut();
        for i in 0..n {
            data[i] -= c.lr * c.weight_decay * data[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            data[i] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("adamw_step"));
        }
        p.accumulate_grad(&g, 1.0)?;
    }
    Ok(())
}
