use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Parameters, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.eps > 0.0;
        if !ok {
            return Err(Error::ConfigInvalid(format!("optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Moment buffers keyed by parameter name, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update from the gradients stored on `params`. A missing
    /// gradient counts as zero.
    pub fn step(&mut self, params: &mut Parameters) -> Result<()> {
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(shape_err(format!("optimizer state for {name}: {} vs {n}", m.len())));
            }
            let grad = p.grad().map(<[f64]>::to_vec);
            if let Some(g) = &grad {
                if g.len() != n {
                    return Err(shape_err(format!("gradient for {name}: {} vs {n}", g.len())));
                }
            }
            for i in 0..n {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let x = &mut p.data_mut()[i];
                *x -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *x);
            }
        }
        Ok(())
    }

    /// Moment buffers as `(name, m, v)` tensors shaped like the parameters.
    pub fn export(&self, params: &Parameters) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        for (name, p) in params.iter() {
            for (prefix, buf) in [("adam.m.", &self.m), ("adam.v.", &self.v)] {
                let data = buf.get(name).cloned().unwrap_or_else(|| vec![0.0; p.numel()]);
                out.push((format!("{prefix}{name}"), Tensor::new(p.shape().to_vec(), data)?));
            }
        }
        Ok(out)
    }

    /// Restores buffers written by [`AdamW::export`].
    pub fn import(
        config: AdamWConfig,
        step: u64,
        params: &Parameters,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut opt = Self::new(config);
        opt.step = step;
        for (name, p) in params.iter() {
            for (prefix, buf) in [("adam.m.", &mut opt.m), ("adam.v.", &mut opt.v)] {
                let key = format!("{prefix}{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::CheckpointMismatch(format!("missing {key}")))?;
                if t.shape() != p.shape() {
                    return Err(Error::CheckpointMismatch(format!("{key}: shape {:?}", t.shape())));
                }
                buf.insert(name.to_string(), t.data().to_vec());
            }
        }
        Ok(opt)
    }
}
