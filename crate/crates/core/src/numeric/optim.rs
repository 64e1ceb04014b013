use std::f64::consts::PI;

use log::warn;
use serde::{Deserialize, Serialize};

use super::layers::Parameter;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments<T> {
    name: String,
    first: Tensor<T>,
    second: Tensor<T>,
}

/// AdamW with decoupled weight decay and bias-corrected moments.
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: Option<Vec<Moments<T>>>,
}

impl<T: Real> AdamW<T> {
    /// Creates an optimizer whose moment state still has to be bound with [`AdamW::init`].
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: None,
        }
    }

    pub fn with_params(config: AdamWConfig, params: &[&Parameter<T>]) -> Self {
        let mut opt = Self::new(config);
        opt.init(params);
        opt
    }

    pub fn init(&mut self, params: &[&Parameter<T>]) {
        self.moments = Some(
            params
                .iter()
                .map(|p| Moments {
                    name: p.name.clone(),
                    first: Tensor::zeros(p.value.shape()),
                    second: Tensor::zeros(p.value.shape()),
                })
                .collect(),
        );
        self.step = 0;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update at learning rate `lr`, then zeroes every gradient.
    pub fn step(&mut self, params: &mut [&mut Parameter<T>], lr: f64) -> Result<()> {
        let moments = self
            .moments
            .as_mut()
            .ok_or_else(|| Error::Usage("adamw: state not initialized".into()))?;
        if moments.len() != params.len() {
            return Err(Error::Usage(format!(
                "adamw: state tracks {} parameters, got {}",
                moments.len(),
                params.len()
            )));
        }
        self.step += 1;
        let cfg = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
        let decay = T::of(1.0 - lr * cfg.weight_decay);
        let lr_t = T::of(lr);
        let (bc1, bc2, eps) = (T::of(bc1), T::of(bc2), T::of(cfg.eps));

        for (p, m) in params.iter_mut().zip(moments.iter_mut()) {
            if p.name != m.name || p.value.shape() != m.first.shape() {
                return Err(Error::Usage(format!(
                    "adamw: parameter {} does not match state {}",
                    p.name, m.name
                )));
            }
            let Parameter { value, grad, .. } = &mut **p;
            let iter = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.first.data_mut().iter_mut().zip(m.second.data_mut()));
            for ((w, &g), (m1, m2)) in iter {
                *w = *w * decay;
                *m1 = b1 * *m1 + one_b1 * g;
                *m2 = b2 * *m2 + one_b2 * g * g;
                let m_hat = *m1 / bc1;
                let v_hat = *m2 / bc2;
                *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Cosine annealing from `base_lr` down to `min_lr` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, min_lr: f64, total_steps: u64) -> Result<Self> {
        if !(base_lr.is_finite() && min_lr.is_finite()) || min_lr < 0.0 || min_lr > base_lr {
            return Err(Error::config(format!(
                "cosine schedule needs 0 <= min_lr <= base_lr, got {min_lr} and {base_lr}"
            )));
        }
        Ok(Self {
            base_lr,
            min_lr,
            total_steps,
        })
    }

    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let step = if step > self.total_steps {
            warn!(
                "cosine schedule: step {step} past horizon {}, clamping",
                self.total_steps
            );
            self.total_steps
        } else {
            step
        };
        if step == self.total_steps {
            return self.min_lr;
        }
        let progress = step as f64 / self.total_steps as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}
