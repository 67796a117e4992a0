//! Adam optimization and the two-stage learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Bias-corrected Adam with per-parameter moment estimates, keyed by
/// parameter name so checkpoints and gradients line up independent of
/// traversal order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update across all named parameters. `visit` walks the
    /// parameter tree (same protocol as `ModelParams::visit_mut`); `grads`
    /// maps parameter name to a gradient slice of matching length, and
    /// parameters without an entry are treated as zero-gradient (their
    /// moments still decay). A non-finite gradient aborts before any
    /// parameter is touched, naming the offender.
    pub fn step(
        &mut self,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
        visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor)),
    ) -> Result<()> {
        for (name, grad) in grads {
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Train(format!(
                    "non-finite gradient for parameter `{name}`"
                )));
            }
        }
        self.step += 1;
        let correction1 = 1.0 - self.beta1.powi(self.step as i32);
        let correction2 = 1.0 - self.beta2.powi(self.step as i32);
        let (beta1, beta2, epsilon) = (self.beta1, self.beta2, self.epsilon);
        let moments = &mut self.moments;
        let mut seen: Vec<String> = Vec::new();
        let mut failure: Option<Error> = None;
        visit(&mut |name, tensor| {
            if failure.is_some() {
                return;
            }
            seen.push(name.to_string());
            let n = tensor.numel();
            let grad = grads.get(name).map(Vec::as_slice);
            if let Some(g) = grad {
                if g.len() != n {
                    failure = Some(Error::Train(format!(
                        "gradient length {} does not match parameter `{name}` ({n})",
                        g.len()
                    )));
                    return;
                }
            }
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let values = tensor.values_mut();
            for i in 0..n {
                let g = grad.map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        for name in grads.keys() {
            if !seen.iter().any(|s| s == name) {
                return Err(Error::Train(format!(
                    "gradient for unknown parameter `{name}`"
                )));
            }
        }
        Ok(())
    }
}

/// Two-stage schedule: a short warm phase at a higher rate, then the main
/// rate for the rest of training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub warm_lr: f64,
    pub warm_epochs: usize,
    pub main_lr: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            warm_lr: 1e-3,
            warm_epochs: 2,
            main_lr: 1e-4,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.warm_epochs {
            self.warm_lr
        } else {
            self.main_lr
        }
    }
}
