//! SGD with momentum and decoupled weight decay, plus the warmup + cosine
//! learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::params::{ParamKind, ParamVisit};
use crate::scalar::f64math;
use crate::scalar::Real;
use crate::tensor::Gradients;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// `v <- mu v + g; theta <- theta - lr v - lr wd theta`
pub struct Sgd<F: Real> {
    pub config: SgdConfig,
    buffers: BTreeMap<String, Vec<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            buffers: BTreeMap::new(),
        }
    }

    pub fn step<M: ParamVisit<F>>(&mut self, model: &mut M, grads: &Gradients<F>, lr: f64) {
        let mu = F::from_f64(self.config.momentum);
        let lr_f = F::from_f64(lr);
        let decay = F::from_f64(lr * self.config.weight_decay);
        let buffers = &mut self.buffers;
        model.visit_params_mut("", &mut |path, tensor, kind| {
            if kind != ParamKind::Trainable {
                return;
            }
            let Some(grad) = grads.of_tensor(tensor) else {
                return; // parameter unused by this step's graph
            };
            let buf = buffers
                .entry(path)
                .or_insert_with(|| vec![F::zero(); tensor.numel()]);
            let values = tensor.values_mut();
            for ((theta, v), &g) in values.iter_mut().zip(buf.iter_mut()).zip(grad) {
                *v = mu * *v + g;
                *theta = *theta - lr_f * *v - decay * *theta;
            }
        });
    }

    pub fn buffers(&self) -> &BTreeMap<String, Vec<F>> {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: BTreeMap<String, Vec<F>>) {
        self.buffers = buffers;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
}

/// Linear warmup to `base_lr`, then cosine decay to zero over the remaining
/// epochs. Continuous at the phase boundary.
pub fn lr_schedule(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    assert!(epoch < cfg.epochs, "epoch index out of range");
    let w = cfg.warmup_epochs;
    if epoch < w {
        return cfg.base_lr * (epoch + 1) as f64 / w as f64;
    }
    if cfg.epochs == w {
        return cfg.base_lr;
    }
    let progress = (epoch - w) as f64 / (cfg.epochs - w) as f64;
    0.5 * cfg.base_lr * (1.0 + f64math::cos(core::f64::consts::PI * progress))
}
