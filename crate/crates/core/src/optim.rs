//! Adam with externally visible moments so training state can be checkpointed.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// First and second moments of one parameter.
#[derive(Clone, Debug)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    /// Restores a state captured with [`Adam::step_count`] and [`Adam::moments`].
    pub fn with_state(config: AdamConfig, step: u64, moments: BTreeMap<String, Moments>) -> Result<Self> {
        let mut adam = Self::new(config)?;
        adam.step = step;
        adam.moments = moments;
        Ok(adam)
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    /// One bias-corrected update of every parameter that received a gradient.
    /// A zero learning rate still advances the moments but leaves parameters untouched.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, var) in params.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // keep the moments free of autograd history
            let g = g.detach();
            let (m, v) = match self.moments.get(name) {
                Some(s) => (
                    s.m.affine(beta1, 0.0)?.add(&g.affine(1.0 - beta1, 0.0)?)?,
                    s.v.affine(beta2, 0.0)?.add(&g.sqr()?.affine(1.0 - beta2, 0.0)?)?,
                ),
                None => (g.affine(1.0 - beta1, 0.0)?, g.sqr()?.affine(1.0 - beta2, 0.0)?),
            };
            if lr != 0.0 {
                let denom = v.affine(1.0 / c2, 0.0)?.sqrt()?.affine(1.0, eps)?;
                let update = m.affine(lr / c1, 0.0)?.div(&denom)?;
                var.set(&var.as_tensor().detach().sub(&update)?)?;
            }
            self.moments.insert(name.to_string(), Moments { m: m.detach(), v: v.detach() });
        }
        Ok(())
    }
}

/// Rescales every gradient so that their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &ParamStore, grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (_, var) in params.vars() {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for (_, var) in params.vars() {
            if let Some(g) = grads.remove(var.as_tensor()) {
                grads.insert(var.as_tensor(), g.detach().affine(scale, 0.0)?);
            }
        }
    }
    Ok(norm)
}
