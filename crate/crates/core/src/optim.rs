//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::diffmath::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: ParamSet,
    pub v: ParamSet,
    pub steps: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::config("optim.beta1", "betas must lie in [0, 1)"));
        }
        if !(cfg.eps > 0.0) {
            return Err(Error::config("optim.eps", "must be positive"));
        }
        Ok(Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: 0,
        })
    }

    /// One update of `params` with learning rate `lr`. Parameters without a
    /// gradient entry are left alone.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        if !grads.all_finite() {
            let bad = grads
                .iter()
                .find(|(_, t)| !t.all_finite())
                .map(|(n, _)| n.clone())
                .unwrap_or_default();
            return Err(Error::Numeric(format!("non-finite gradient for `{bad}`")));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment buffers mirror params");
            for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
            }
            let v = self.v.get_mut(name).expect("moment buffers mirror params");
            for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            }
            let m = self.m.get(name).expect("present");
            let v = self.v.get(name).expect("present");
            for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *pv -= lr * (mv / c1) / ((vv / c2).sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
