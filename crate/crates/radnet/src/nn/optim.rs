//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::tape::{Arr, Gradients};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0,1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One optimizer instance per parameter group (the generator and each
/// discriminator bank get their own).
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: HashMap<String, Arr>,
    v: HashMap<String, Arr>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW { cfg, step: 0, m: HashMap::new(), v: HashMap::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update using `grads`. Parameters without a gradient are
    /// left alone; gradients for unknown parameters are an error.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradients".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        let mut names: Vec<&String> = grads.by_name.keys().collect();
        names.sort();
        for name in names {
            let g = &grads.by_name[name];
            let cur = store
                .get(name)
                .ok_or_else(|| Error::Internal(format!("gradient for unknown parameter {name}")))?;
            if cur.shape() != g.shape() {
                return Err(Error::Internal(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    cur.shape()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g);
            let (lr, eps, wd) = (self.cfg.lr, self.cfg.eps, self.cfg.weight_decay);
            let (m, v) = (&self.m[name], &self.v[name]);
            store.update(name, |p| {
                ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
            })?;
        }
        Ok(())
    }

    /// Moment tensors and step counter for checkpointing.
    pub fn export_state(&self) -> (u64, Vec<(String, Arr)>) {
        let mut out = Vec::new();
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        for name in names {
            out.push((format!("m.{name}"), self.m[name].clone()));
            out.push((format!("v.{name}"), self.v[name].clone()));
        }
        (self.step, out)
    }

    pub fn import_state(&mut self, step: u64, tensors: Vec<(String, Arr)>) -> Result<()> {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (name, arr) in tensors {
            if let Some(rest) = name.strip_prefix("m.") {
                self.m.insert(rest.to_owned(), arr);
            } else if let Some(rest) = name.strip_prefix("v.") {
                self.v.insert(rest.to_owned(), arr);
            } else {
                return Err(Error::Checkpoint(format!("unrecognized optimizer tensor {name}")));
            }
        }
        Ok(())
    }
}
