//! Adam with loss-coupled L2 weight decay, and cosine learning-rate annealing.

use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First and second moments of one tensor plus its own step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    /// One Adam update of `param` in place with learning rate `lr`.
    pub fn update(&mut self, cfg: &AdamConfig, lr: f64, param: &mut [f64], grad: &[f64]) {
        self.steps += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.steps as i32);
        for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let g = g + cfg.weight_decay * *p;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Adam over every trainable tensor of a [`ParamStore`]. Tensors whose
/// gradient slot is empty (inactive search paths) keep both their values and
/// their moments untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Adam {
            config,
            moments: store.entries().iter().map(|e| Moments::new(e.data.len())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        for ((entry, slot), moments) in store.entries_mut().iter_mut().zip(grads.slots()).zip(&mut self.moments) {
            if !entry.trainable {
                continue;
            }
            if let Some(g) = slot {
                moments.update(&self.config, lr, &mut entry.data, g);
            }
        }
    }
}

/// Cosine annealing from `base` to zero over `total_steps` optimizer steps,
/// without restarts. The final step runs at learning rate zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base: f64, total_steps: usize) -> Self {
        CosineSchedule { base, total_steps }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.base;
        }
        let t = (step.min(self.total_steps - 1)) as f64 / (self.total_steps - 1) as f64;
        0.5 * self.base * (1.0 + (std::f64::consts::PI * t).cos())
    }
}
