use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters keep `requires_grad = false` and are skipped by
    /// the optimizer.
    pub requires_grad: bool,
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter {
            name: name.into(),
            value,
            requires_grad: true,
            grad: None,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor) -> Self {
        Parameter {
            requires_grad: false,
            ..Parameter::new(name, value)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers and step counter for ADAM.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub(crate) first: Vec<Tensor>,
    pub(crate) second: Vec<Tensor>,
    pub(crate) step: u64,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[Parameter]) -> Self {
        AdamState {
            config,
            first: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    pub(crate) fn from_parts(config: AdamConfig, first: Vec<Tensor>, second: Vec<Tensor>, step: u64) -> Self {
        AdamState {
            config,
            first,
            second,
            step,
        }
    }

    /// One bias-corrected ADAM update using each parameter's `grad`.
    ///
    /// Parameters that are frozen, have no gradient, or whose gradient is
    /// identically zero are left untouched together with their moments.
    /// All gradients are validated before anything is modified.
    pub fn step(&mut self, params: &mut [Parameter]) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameters for {} moment buffers", params.len(), self.first.len()),
            ));
        }
        for (p, m) in params.iter().zip(&self.first) {
            if p.value.shape() != m.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter `{}` is {:?}, moments {:?}", p.name, p.value.shape(), m.shape()),
                ));
            }
            if let Some(g) = &p.grad {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape(
                        "adam_step",
                        format!("gradient of `{}` is {:?}, expected {:?}", p.name, g.shape(), p.value.shape()),
                    ));
                }
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if !p.requires_grad {
                continue;
            }
            let Some(g) = &p.grad else { continue };
            if g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            let values = p.value.data_mut();
            for (((w, &gi), mi), vi) in values
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
