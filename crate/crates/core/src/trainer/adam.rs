//! Adam with bias correction.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Result, SpenError};
use crate::params::{ParamGrads, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SpenError::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First and second moments per parameter plus the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(k, t)| (k.to_string(), Tensor::zeros_like(t)))
            .collect();
        Adam {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One update of every parameter named in `grads` and not in `frozen`.
    pub fn update(
        &mut self,
        params: &mut ParamSet,
        grads: &ParamGrads,
        frozen: &BTreeSet<String>,
    ) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            if frozen.contains(name) {
                continue;
            }
            let p = params.get_mut(name)?;
            p.check_same_shape(g, "adam")?;
            let m = self.m.get_mut(name).expect("moments track every parameter");
            let v = self.v.get_mut(name).expect("moments track every parameter");
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
