//! Cosine learning-rate schedule and AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use a2o_tensor::{ParamSet, Real, Tensor};

use crate::{Error, Result};

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`, clamping `step` to
/// `total`. A zero-length schedule stays at `lr0`.
pub fn cosine_lr(step: u64, total: u64, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = step.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed steps.
    pub step: u64,
    /// First and second moments per parameter name.
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter in name order. Parameters missing from
    /// `grads` are treated as having zero gradient, so they still decay.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Invalid(format!(
                    "gradient of {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (name, p) in params.iter_mut() {
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let g = grads.get(name);
            for (k, theta) in p.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| Real::to_f64(g.data()[k]));
                let mk = b1 * Real::to_f64(m.data()[k]) + (1.0 - b1) * gk;
                let vk = b2 * Real::to_f64(v.data()[k]) + (1.0 - b2) * gk * gk;
                m.data_mut()[k] = T::of(mk);
                v.data_mut()[k] = T::of(vk);
                let update = lr * (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
                *theta = T::of(Real::to_f64(*theta) * decay - update);
            }
        }
        Ok(())
    }
}
