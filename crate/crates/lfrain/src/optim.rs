//! Adam optimizer over named parameters, with checkpointable state and the
//! stepped learning-rate decay schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug)]
pub struct AdamCfg {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamCfg {
    fn default() -> AdamCfg {
        AdamCfg { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Halves (or scales by `factor`) the base rate once per `every` completed
/// epochs.
pub fn lr_at(base: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    if every == 0 {
        return base;
    }
    base * factor.powi((epoch / every) as i32)
}

/// Adam with bias correction. First and second moments live per parameter
/// name; `apply` advances the shared step counter once per call.
pub struct Adam {
    pub cfg: AdamCfg,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamCfg) -> Result<Adam> {
        if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || !(cfg.eps > 0.0) {
            return Err(Error::domain(format!(
                "bad Adam config lr={} beta1={} beta2={} eps={}",
                cfg.lr, cfg.beta1, cfg.beta2, cfg.eps
            )));
        }
        Ok(Adam { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every (name, gradient) pair, using `lr` for this
    /// step (callers pass the scheduled rate).
    pub fn apply(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, g) in grads {
            let p = store.get(name)?;
            if g.len() != p.vals.len() {
                return Err(Error::shape(format!(
                    "gradient for '{name}' has length {}, parameter has {}",
                    g.len(),
                    p.vals.len()
                )));
            }
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::numeric(format!("non-finite gradient for '{name}': {bad}")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut new_vals = p.vals.clone();
            for i in 0..g.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                new_vals[i] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
            store.set_vals(name, new_vals)?;
        }
        Ok(())
    }

    /// Serializes moments and step under `prefix` (for one checkpoint file
    /// shared with the network weights).
    pub fn save_into(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        store.remove_prefix(prefix);
        store.insert(&format!("{prefix}step"), vec![1], vec![self.step as f64])?;
        for (name, m) in &self.m {
            store.insert(&format!("{prefix}m.{name}"), vec![m.len()], m.clone())?;
        }
        for (name, v) in &self.v {
            store.insert(&format!("{prefix}v.{name}"), vec![v.len()], v.clone())?;
        }
        Ok(())
    }

    /// Restores state written by [`save_into`]; absent prefix means a fresh
    /// optimizer.
    pub fn load_from(store: &ParamStore, prefix: &str, cfg: AdamCfg) -> Result<Adam> {
        let mut opt = Adam::new(cfg)?;
        let step_name = format!("{prefix}step");
        if !store.contains(&step_name) {
            return Ok(opt);
        }
        opt.step = store.get(&step_name)?.vals[0] as u64;
        let m_pre = format!("{prefix}m.");
        for name in store.names_with_prefix(&m_pre) {
            let inner = name[m_pre.len()..].to_string();
            opt.m.insert(inner, store.get(name)?.vals.clone());
        }
        let v_pre = format!("{prefix}v.");
        for name in store.names_with_prefix(&v_pre) {
            let inner = name[v_pre.len()..].to_string();
            opt.v.insert(inner, store.get(name)?.vals.clone());
        }
        Ok(opt)
    }
}
