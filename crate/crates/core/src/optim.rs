//! AdamW with decoupled weight decay and a polynomial learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub poly_power: f64,
    pub steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            poly_power: 0.9,
            steps: 2000,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.steps == 0 {
            return Err(Error::Config("learning rate and step count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// lr · (1 − step/total)^power.
    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = 1.0 - step.min(self.steps) as f64 / self.steps as f64;
        self.lr * frac.powf(self.poly_power)
    }
}

pub struct AdamW {
    pub cfg: OptimConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: usize,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, store: &ParamStore) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update; `grads[i]` is the gradient of parameter `i` (None when unreached).
    pub fn update<'a>(&mut self, store: &mut ParamStore, grads: impl Iterator<Item = Option<&'a Tensor>>) -> f64 {
        let lr = self.cfg.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let decays: Vec<bool> = store.ids().map(|id| store.decays(id)).collect();
        for (i, (param, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            let decay = if decays[i] { self.cfg.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = param.data_mut();
            match g {
                Some(g) => {
                    for (((pj, mj), vj), gj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *mj = b1 * *mj + (1.0 - b1) * gj;
                        *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                        let step = (*mj / c1) / ((*vj / c2).sqrt() + self.cfg.eps);
                        *pj -= lr * (step + decay * *pj);
                    }
                }
                None => {
                    for ((pj, mj), vj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mj *= b1;
                        *vj *= b2;
                        let step = (*mj / c1) / ((*vj / c2).sqrt() + self.cfg.eps);
                        *pj -= lr * (step + decay * *pj);
                    }
                }
            }
        }
        lr
    }
}
