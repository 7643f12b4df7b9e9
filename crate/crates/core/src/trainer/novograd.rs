//! NovoGrad: Adam-like first moment over gradients normalized by a
//! per-tensor second moment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{Array, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NovoGradConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for NovoGradConfig {
    fn default() -> Self {
        Self {
            beta1: 0.95,
            beta2: 0.98,
            weight_decay: 0.001,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct OptimState {
    m: BTreeMap<String, Array>,
    v: BTreeMap<String, f64>,
    step: u64,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applied updates so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn second_moment(&self, name: &str) -> Option<f64> {
        self.v.get(name).copied()
    }

    pub fn first_moment(&self, name: &str) -> Option<&Array> {
        self.m.get(name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Applied,
    /// Nothing was changed.
    Skipped {
        reason: String,
    },
}

/// One update with learning rate `lr`. The second moment of a tensor is
/// initialized to its first squared gradient norm. Parameters without a
/// gradient are left alone.
pub fn novograd_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Array>,
    state: &mut OptimState,
    cfg: &NovoGradConfig,
    lr: f64,
) -> Result<StepOutcome> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "novograd_step",
                format!("{name}: param {:?}, grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.all_finite() {
            return Ok(StepOutcome::Skipped {
                reason: format!("non-finite gradient for {name}"),
            });
        }
    }
    for (name, g) in grads {
        let norm2 = g.sq_norm();
        let v = match state.v.get(name) {
            Some(&v) => cfg.beta2 * v + (1.0 - cfg.beta2) * norm2,
            None => norm2,
        };
        state.v.insert(name.clone(), v);
        let denom = v.sqrt() + cfg.eps;
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Array::zeros(g.shape().to_vec()));
        for ((mi, &gi), pi) in m.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
            *mi = cfg.beta1 * *mi + gi / denom + cfg.weight_decay * *pi;
            *pi -= lr * *mi;
        }
    }
    state.step += 1;
    Ok(StepOutcome::Applied)
}
