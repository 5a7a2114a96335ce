//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr >= 0.0 && unit(self.beta1) && unit(self.beta2) && self.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from gradients in store order. Every parameter needs a gradient;
    /// nothing is modified when one is missing.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::shape(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), self.m.len()),
            ));
        }
        let ids: Vec<_> = store.ids().collect();
        for (&id, g) in ids.iter().zip(grads) {
            if g.is_none() {
                return Err(Error::MissingGradient(store.name(id).to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        let step_size = T::from_f64(c.lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(c.eps);
        for (i, (&id, g)) in ids.iter().zip(grads).enumerate() {
            let g = g.as_ref().expect("checked above").data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                p[j] = p[j] - step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}
