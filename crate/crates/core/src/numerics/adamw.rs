//! Adam with decoupled weight decay.
//!
//! ```text
//! m ← β₁·m + (1 − β₁)·g
//! v ← β₂·v + (1 − β₂)·g²
//! θ ← θ − lr·wd·θ − lr·m̂ / (√v̂ + ε)      m̂ = m/(1 − β₁ᵗ), v̂ = v/(1 − β₂ᵗ)
//! ```
//!
//! The decay and the Adam step both read the pre-update θ.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One parameter handed to [`AdamW::step`]. Rows flagged in `frozen_rows`
/// (rows = leading dimension) are skipped entirely, moments included.
pub struct ParamSlot<'a> {
    pub tensor: &'a mut Tensor,
    pub frozen_rows: Option<&'a [bool]>,
}

impl<'a> ParamSlot<'a> {
    pub fn new(tensor: &'a mut Tensor) -> Self {
        Self {
            tensor,
            frozen_rows: None,
        }
    }

    pub fn with_frozen_rows(tensor: &'a mut Tensor, frozen: &'a [bool]) -> Self {
        Self {
            tensor,
            frozen_rows: Some(frozen),
        }
    }
}

/// Optimizer state. Slots must be passed in the same order on every step.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, slot: usize) -> Option<&[f64]> {
        self.first_moment.get(slot).map(Vec::as_slice)
    }

    pub fn second_moment(&self, slot: usize) -> Option<&[f64]> {
        self.second_moment.get(slot).map(Vec::as_slice)
    }

    /// Applies one update to every trainable slot. Gradients are left in place.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_>]) -> Result<()> {
        if self.first_moment.is_empty() {
            self.first_moment = slots.iter().map(|s| vec![0.0; s.tensor.numel()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != slots.len() {
            bail!(
                Contract,
                "optimizer tracks {} parameters but {} were passed",
                self.first_moment.len(),
                slots.len()
            );
        }
        for (i, slot) in slots.iter().enumerate() {
            if slot.tensor.numel() != self.first_moment[i].len() {
                bail!(Contract, "parameter {i} changed size between steps");
            }
            if slot.tensor.is_trainable() && slot.tensor.grad().is_none() {
                bail!(Contract, "parameter {i} has no gradient");
            }
        }
        self.step_count += 1;
        let AdamWConfig {
            learning_rate: lr,
            weight_decay: wd,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (i, slot) in slots.iter_mut().enumerate() {
            if !slot.tensor.is_trainable() {
                continue;
            }
            let row_len = slot.tensor.row_len();
            let grad = slot.tensor.grad().expect("checked above").to_vec();
            let frozen = slot.frozen_rows;
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let data = slot.tensor.data_mut();
            for (j, theta) in data.iter_mut().enumerate() {
                if frozen.is_some_and(|f| f[j / row_len]) {
                    continue;
                }
                let g = grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta = *theta - lr * wd * *theta - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
