//! Adam optimizer: per-coordinate moment estimates with bias correction.
//! State is keyed by parameter name so checkpoints can carry it, and
//! frozen parameters are never touched.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 7e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment vectors for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    // BTreeMap so checkpoint serialization walks a stable order.
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Adam> {
        cfg.validate()?;
        Ok(Adam {
            cfg,
            t: 0,
            moments: BTreeMap::new(),
        })
    }

    /// Rebuild from checkpointed state.
    pub fn restore(
        cfg: AdamConfig,
        t: u64,
        moments: impl IntoIterator<Item = (String, Moments)>,
    ) -> Result<Adam> {
        cfg.validate()?;
        let moments: BTreeMap<String, Moments> = moments.into_iter().collect();
        for (name, mo) in &moments {
            if mo.m.len() != mo.v.len() {
                return Err(Error::contract(
                    "adam",
                    format!("moment lengths disagree for {name:?}: {} vs {}", mo.m.len(), mo.v.len()),
                ));
            }
        }
        Ok(Adam { cfg, t, moments })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Completed update count.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Moments)> {
        self.moments.iter().map(|(n, m)| (n.as_str(), m))
    }

    /// Apply one update. Every trainable parameter advances its moment
    /// state; a parameter absent from `grads` is treated as having a zero
    /// gradient this step. Frozen parameters are skipped entirely.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<String, Vec<f64>>) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let m_corr = 1.0 - beta1.powi(t);
        let v_corr = 1.0 - beta2.powi(t);
        let names: Vec<String> = store.names().to_vec();
        for name in names {
            if !store.is_trainable(&name)? {
                continue;
            }
            let param = store.get_mut(&name)?;
            let n = param.len();
            if let Some(g) = grads.get(&name) {
                if g.len() != n {
                    return Err(Error::contract(
                        "adam",
                        format!("gradient for {name:?} has {} values, parameter has {n}", g.len()),
                    ));
                }
            }
            let slot = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            if slot.m.len() != n {
                return Err(Error::contract(
                    "adam",
                    format!("stale moments for {name:?}: {} values vs {n}", slot.m.len()),
                ));
            }
            let zero = vec![0.0; n];
            let g = grads.get(&name).map(|g| g.as_slice()).unwrap_or(&zero);
            let data = param.data_mut();
            for i in 0..n {
                slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g[i];
                slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = slot.m[i] / m_corr;
                let v_hat = slot.v[i] / v_corr;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
