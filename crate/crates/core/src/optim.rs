//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments per trainable parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, ..Default::default() }
    }

    /// Updates every trainable parameter that has a gradient. Frozen entries
    /// are never touched, even if a gradient is supplied for them.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - (c.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(self.step as i32);
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            if !p.trainable {
                continue;
            }
            ensure!(grad.shape() == p.value.shape(), Shape, "gradient for `{name}` has shape {:?}", grad.shape());
            ensure!(grad.all_finite(), NonFinite, "gradient for `{name}`");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
            let (md, vd, w) = (m.data_mut(), v.data_mut(), p.value.data_mut());
            for i in 0..w.len() {
                let g = grad.data()[i];
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * g;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * g * g;
                let mh = md[i] as f64 / bc1;
                let vh = vd[i] as f64 / bc2;
                let upd = mh / (vh.sqrt() + c.eps as f64) + c.weight_decay as f64 * w[i] as f64;
                w[i] = (w[i] as f64 - c.lr as f64 * upd) as f32;
            }
        }
        Ok(())
    }
}
