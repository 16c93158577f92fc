//! Adam with bias correction and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            m: store.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: store.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }
}

/// One Adam update on a flat parameter slice.
pub fn adam_step(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
    /// Parameters with `false` are never updated.
    pub trainable: Vec<bool>,
    /// Per-parameter multiplier on the learning rate.
    pub lr_scale: Vec<f64>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            config: AdamConfig::default(),
            state: AdamState::new(store),
            trainable: vec![true; store.len()],
            lr_scale: vec![1.0; store.len()],
        }
    }

    /// Multiplies the learning rate of every parameter whose name matches.
    pub fn scale_lr(&mut self, store: &ParamStore, pred: impl Fn(&str) -> bool, factor: f64) {
        for (s, name) in self.lr_scale.iter_mut().zip(store.names()) {
            if pred(name) {
                *s *= factor;
            }
        }
    }

    pub fn freeze(&mut self, store: &ParamStore, pred: impl Fn(&str) -> bool) {
        for (t, name) in self.trainable.iter_mut().zip(store.names()) {
            *t = !pred(name);
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape("adam_step", &[store.len()], &[grads.len()]));
        }
        self.state.step += 1;
        let step = self.state.step;
        for (i, (p, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            if !self.trainable[i] {
                continue;
            }
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
            adam_step(p.data_mut(), g.data(), &mut self.state.m[i], &mut self.state.v[i], step, lr * self.lr_scale[i], &self.config)?;
        }
        Ok(())
    }
}

/// Cosine decay from `lr0` to `lr_min` over `total` steps.
pub fn cosine_lr(lr0: f64, lr_min: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}
