//! Bias-corrected Adam.

use super::ParamSet;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state: step counter plus per-parameter moment accumulators.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: BTreeMap<String, Vec<f64>>,
    pub second_moment: BTreeMap<String, Vec<f64>>,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(hyper: AdamHyper) -> Self {
        AdamState {
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            hyper,
        }
    }

    /// Applies one update using the gradients currently held by `params`.
    /// Gradients are left untouched; the caller zeroes them between steps.
    /// `lr_override` supports schedules; `None` uses the configured rate.
    pub fn step(&mut self, params: &mut ParamSet, lr_override: Option<f64>) -> Result<()> {
        let lr = lr_override.unwrap_or(self.hyper.lr);
        let (b1, b2, eps) = (self.hyper.beta1, self.hyper.beta2, self.hyper.epsilon);
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (name, p) in &mut params.params {
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.values.len()]);
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.values.len()]);
            if m.len() != p.values.len() || v.len() != p.values.len() {
                return Err(Error::Contract(format!(
                    "optimizer moment shape mismatch for {name}"
                )));
            }
            for i in 0..p.values.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
