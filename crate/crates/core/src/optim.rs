//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::f64::consts::PI;

use amda_autodiff::Tensor;

use crate::error::{AmdaError, Result};
use crate::params::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let frac = step.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One update of every parameter. `grads` is indexed like the store.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(AmdaError::Dimension(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.shape() != store.get(id).shape() {
                return Err(AmdaError::Dimension(format!(
                    "gradient {:?} for parameter {} {:?}",
                    g.shape(),
                    store.name(id),
                    store.get(id).shape()
                )));
            }
            if !g.is_finite() {
                return Err(AmdaError::NonFinite {
                    what: format!("gradient of {}", store.name(id)),
                });
            }
        }
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for (k, (id, g)) in store.ids().zip(grads).enumerate().collect::<Vec<_>>() {
            let theta = store.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                theta[i] = theta[i] * decay - lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
