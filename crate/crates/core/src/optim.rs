//! SGD with momentum and L2 weight decay, plus a step learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `lr_gamma` every `lr_step` epochs.
    pub lr_step: usize,
    pub lr_gamma: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_step: 5,
            lr_gamma: 0.9,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if self.lr_step == 0 {
            return Err(Error::config("lr_step", "must be positive"));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::config("lr_gamma", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Learning rate in effect during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = epoch.saturating_sub(1) / self.lr_step;
        self.lr * self.lr_gamma.powi(decays as i32)
    }
}

/// One in-place update:
/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(format!(
            "sgd_step: param {} / grad {} / buffer {} lengths differ",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum state for a list of parameter tensors.
///
/// With `single_precision` set, parameters and buffers are rounded to the
/// nearest `f32` after every update so that they survive a 32-bit checkpoint
/// bit-exactly.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
    single_precision: bool,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &[Tensor], single_precision: bool) -> Self {
        let velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            config,
            velocity,
            single_precision,
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<f64>>) -> Result<()> {
        if velocity.len() != self.velocity.len()
            || velocity
                .iter()
                .zip(&self.velocity)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::shape("momentum buffers do not match parameters"));
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::shape(format!(
                "sgd: {} params, {} grads, {} buffers",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "sgd: param shape {:?} vs grad shape {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            sgd_step(
                p.data_mut(),
                g.data(),
                v,
                lr,
                self.config.momentum,
                self.config.weight_decay,
            )?;
            if self.single_precision {
                round_f32(p.data_mut());
                round_f32(v);
            }
        }
        Ok(())
    }
}

pub(crate) fn round_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}
