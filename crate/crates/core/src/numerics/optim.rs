//! AdamW with decoupled weight decay and a linear warmup / linear decay schedule.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Linear warmup to `peak` over `warmup_steps`, then linear decay to zero at
/// `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            peak: lr,
            warmup_steps: 0,
            total_steps: u64::MAX,
        }
    }

    /// Learning rate applied by the update taken at `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        if self.total_steps == u64::MAX || self.total_steps <= self.warmup_steps {
            return self.peak;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let remaining = (self.total_steps - step) as f64;
        self.peak * remaining / (self.total_steps - self.warmup_steps) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            schedule: LrSchedule {
                peak: 1e-3,
                warmup_steps: 500,
                total_steps: 20_000,
            },
        }
    }
}

/// First/second moments for each parameter plus the update counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Parameters excluded from weight decay (biases, norm gains).
    pub no_decay: Vec<bool>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            no_decay: alloc::vec![false; params.len()],
        }
    }

    pub fn with_no_decay(mut self, mask: Vec<bool>) -> Self {
        self.no_decay = mask;
        self
    }

    pub fn current_lr(&self) -> f64 {
        self.config.schedule.lr_at(self.step)
    }
}

/// One AdamW update in place. Returns the learning rate that was applied.
pub fn adamw_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.m.len() || state.no_decay.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::ShapeMismatch(format!(
                "adamw param {i}: {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    let cfg = state.config;
    let lr = cfg.schedule.lr_at(state.step);
    let t = (state.step + 1) as f64;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let wd = if state.no_decay[i] { 0.0 } else { cfg.weight_decay };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * (mhat / (libm::sqrt(vhat) + cfg.eps) + wd * *pv);
        }
    }
    state.step += 1;
    Ok(lr)
}
