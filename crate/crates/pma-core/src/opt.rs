//! Adam with bias correction. Updates apply only to trainable parameters
//! whose gradient was populated by a backward pass since the last step;
//! gradients are zeroed after the update.

use std::collections::HashMap;

use crate::param::Param;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Per-parameter step count for bias correction; parameters that skip a
    /// step (no gradient) keep their correction schedule consistent.
    t: u64,
}

pub struct Adam {
    cfg: AdamConfig,
    params: Vec<Param>,
    slots: HashMap<u64, Slot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    /// Number of parameters updated this step.
    Applied { updated: usize },
    /// No trainable parameter had a fresh gradient; nothing was touched.
    NoGradients,
}

impl Adam {
    pub fn new(params: Vec<Param>, cfg: AdamConfig) -> Adam {
        Adam {
            cfg,
            params,
            slots: HashMap::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn step(&mut self) -> StepOutcome {
        let fresh: Vec<Param> = self
            .params
            .iter()
            .filter(|p| p.trainable() && p.grad_fresh())
            .cloned()
            .collect();
        if fresh.is_empty() {
            return StepOutcome::NoGradients;
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        for p in &fresh {
            let grad = p.grad();
            let slot = self.slots.entry(p.id()).or_insert_with(|| Slot {
                m: vec![0.0; grad.numel()],
                v: vec![0.0; grad.numel()],
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - beta1.powi(slot.t as i32);
            let bc2 = 1.0 - beta2.powi(slot.t as i32);
            let g = grad.data();
            for i in 0..g.len() {
                slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g[i];
                slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g[i] * g[i];
            }
            let (m, v) = (&slot.m, &slot.v);
            p.update_value(|value, _| {
                for i in 0..value.len() {
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
            p.zero_grad();
            p.clear_grad_fresh();
        }
        StepOutcome::Applied {
            updated: fresh.len(),
        }
    }
}
